#include "refground/encoder.hpp"

#include <atomic>
#include <cctype>

namespace refground {

namespace {
std::atomic<std::uint64_t> next_instance_id{1};
}

EncoderBackend::EncoderBackend() : instance_id_(next_instance_id.fetch_add(1)) {}

void AttentionRecord::validate() const {
  if (grid_rows <= 0 || grid_cols <= 0) throw DomainError("AttentionRecord: empty grid");
  if (grid_rows * grid_cols != patches()) throw DomainError("AttentionRecord: grid/patch mismatch");
  if ((att.array() <= 0.0).any() || (att.array() >= 1.0).any()) {
    throw DomainError("AttentionRecord: attention entries must lie in (0,1)");
  }
  if ((att.rowwise().sum().array() > 1.0 + 1e-12).any()) {
    throw DomainError("AttentionRecord: per-head patch mass exceeds 1");
  }
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string current;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      current.push_back(static_cast<char>(std::tolower(c)));
    } else if (!current.empty()) {
      tokens.push_back(std::move(current));
      current.clear();
    }
  }
  if (!current.empty()) tokens.push_back(std::move(current));
  return tokens;
}

std::uint64_t fnv1a64(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (char c : bytes) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace refground
