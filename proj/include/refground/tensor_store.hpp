#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace refground {

struct Tensor {
  std::string name;
  std::vector<std::int64_t> shape;
  std::vector<float> data;

  std::int64_t element_count() const;
};

/// Named float32 tensors plus key-value metadata, persisted as a text
/// manifest (`<stem>.manifest`) and one little-endian blob (`<stem>.bin`).
///
/// Manifest layout:
///
///     # refground tensor manifest v1
///     <key> = <value>
///     tensor name=<name> dtype=float32 shape=<d0>x<d1>... byte_offset=<n>
///
/// save() followed by load() reproduces every float bit for bit.
class TensorStore {
 public:
  std::map<std::string, std::string> metadata;

  void add(Tensor tensor);
  void add_matrix(const std::string& name, const Eigen::Ref<const Eigen::MatrixXd>& m);
  void add_vector(const std::string& name, const Eigen::Ref<const Eigen::VectorXd>& v);

  bool contains(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  Eigen::MatrixXd matrix(const std::string& name) const;
  Eigen::VectorXd vector(const std::string& name) const;
  const std::vector<Tensor>& tensors() const { return tensors_; }

  void save(const std::filesystem::path& stem) const;
  static TensorStore load(const std::filesystem::path& stem);

 private:
  std::vector<Tensor> tensors_;
};

}  // namespace refground
