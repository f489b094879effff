#include "refground/tensor_store.hpp"

#include "refground/core.hpp"

#include <bit>
#include <fstream>
#include <numeric>
#include <sstream>

namespace refground {

namespace {

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  return std::filesystem::path(stem.string() + suffix);
}

std::string shape_string(const std::vector<std::int64_t>& shape) {
  std::string out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += 'x';
    out += std::to_string(shape[i]);
  }
  return out.empty() ? "scalar" : out;
}

std::vector<std::int64_t> parse_shape(const std::string& text) {
  std::vector<std::int64_t> shape;
  if (text == "scalar") return shape;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, 'x')) shape.push_back(std::stoll(part));
  return shape;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::int64_t Tensor::element_count() const {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

void TensorStore::add(Tensor tensor) {
  if (tensor.element_count() != static_cast<std::int64_t>(tensor.data.size())) {
    throw DomainError("TensorStore: shape does not match data size for " + tensor.name);
  }
  if (tensor.name.empty() || tensor.name.find_first_of(" \t\n=") != std::string::npos) {
    throw DomainError("TensorStore: invalid tensor name '" + tensor.name + "'");
  }
  if (contains(tensor.name)) throw DomainError("TensorStore: duplicate tensor " + tensor.name);
  tensors_.push_back(std::move(tensor));
}

void TensorStore::add_matrix(const std::string& name, const Eigen::Ref<const Eigen::MatrixXd>& m) {
  Tensor t{name, {m.rows(), m.cols()}, {}};
  t.data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) t.data.push_back(static_cast<float>(m(r, c)));
  }
  add(std::move(t));
}

void TensorStore::add_vector(const std::string& name, const Eigen::Ref<const Eigen::VectorXd>& v) {
  Tensor t{name, {v.size()}, {}};
  t.data.reserve(static_cast<std::size_t>(v.size()));
  for (Eigen::Index i = 0; i < v.size(); ++i) t.data.push_back(static_cast<float>(v(i)));
  add(std::move(t));
}

bool TensorStore::contains(const std::string& name) const {
  return std::any_of(tensors_.begin(), tensors_.end(),
                     [&](const Tensor& t) { return t.name == name; });
}

const Tensor& TensorStore::get(const std::string& name) const {
  for (const auto& t : tensors_) {
    if (t.name == name) return t;
  }
  throw DomainError("TensorStore: no tensor named " + name);
}

Eigen::MatrixXd TensorStore::matrix(const std::string& name) const {
  const Tensor& t = get(name);
  if (t.shape.size() != 2) throw DomainError("TensorStore: " + name + " is not rank 2");
  Eigen::MatrixXd m(t.shape[0], t.shape[1]);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = t.data[r * m.cols() + c];
  }
  return m;
}

Eigen::VectorXd TensorStore::vector(const std::string& name) const {
  const Tensor& t = get(name);
  if (t.shape.size() != 1) throw DomainError("TensorStore: " + name + " is not rank 1");
  Eigen::VectorXd v(t.shape[0]);
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = t.data[i];
  return v;
}

void TensorStore::save(const std::filesystem::path& stem) const {
  std::ofstream manifest(with_suffix(stem, ".manifest"));
  std::ofstream blob(with_suffix(stem, ".bin"), std::ios::binary);
  if (!manifest || !blob) throw std::runtime_error("TensorStore: cannot write " + stem.string());
  manifest << "# refground tensor manifest v1\n";
  for (const auto& [key, value] : metadata) manifest << key << " = " << value << '\n';
  std::uint64_t offset = 0;
  for (const auto& t : tensors_) {
    manifest << "tensor name=" << t.name << " dtype=float32 shape=" << shape_string(t.shape)
             << " byte_offset=" << offset << '\n';
    for (float f : t.data) {
      const auto bits = std::bit_cast<std::uint32_t>(f);
      const char bytes[4] = {static_cast<char>(bits & 0xffu), static_cast<char>((bits >> 8) & 0xffu),
                             static_cast<char>((bits >> 16) & 0xffu),
                             static_cast<char>((bits >> 24) & 0xffu)};
      blob.write(bytes, 4);
    }
    offset += t.data.size() * 4;
  }
}

TensorStore TensorStore::load(const std::filesystem::path& stem) {
  std::ifstream manifest(with_suffix(stem, ".manifest"));
  std::ifstream blob(with_suffix(stem, ".bin"), std::ios::binary);
  if (!manifest || !blob) throw std::runtime_error("TensorStore: cannot read " + stem.string());
  const std::string bytes((std::istreambuf_iterator<char>(blob)), std::istreambuf_iterator<char>());

  TensorStore store;
  std::string line;
  while (std::getline(manifest, line)) {
    line = trim(line);
    if (line.empty() || line.front() == '#') continue;
    if (line.rfind("tensor ", 0) == 0) {
      std::map<std::string, std::string> fields;
      std::stringstream ss(line.substr(7));
      std::string field;
      while (ss >> field) {
        const auto eq = field.find('=');
        if (eq == std::string::npos) throw DomainError("TensorStore: malformed entry: " + line);
        fields[field.substr(0, eq)] = field.substr(eq + 1);
      }
      if (fields["dtype"] != "float32") throw DomainError("TensorStore: unsupported dtype");
      Tensor t{fields.at("name"), parse_shape(fields.at("shape")), {}};
      const auto offset = static_cast<std::size_t>(std::stoull(fields.at("byte_offset")));
      const auto n = static_cast<std::size_t>(t.element_count());
      if (offset + n * 4 > bytes.size()) throw DomainError("TensorStore: blob too short for " + t.name);
      t.data.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + offset + i * 4);
        const std::uint32_t bits = std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) |
                                   (std::uint32_t{p[2]} << 16) | (std::uint32_t{p[3]} << 24);
        t.data[i] = std::bit_cast<float>(bits);
      }
      store.add(std::move(t));
    } else {
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw DomainError("TensorStore: malformed line: " + line);
      store.metadata[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
  }
  return store;
}

}  // namespace refground
