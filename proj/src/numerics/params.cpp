#include "pdraft/numerics/params.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace pdraft {

static_assert(std::endian::native == std::endian::little,
              "checkpoint IO assumes a little-endian host");

std::size_t ParamStore::add(std::string name, Tensor2D value, bool trainable) {
  if (by_name_.count(name) != 0) throw ConfigError("duplicate parameter name: " + name);
  by_name_.emplace(name, params_.size());
  params_.push_back(Parameter{std::move(name), std::move(value), trainable});
  return params_.size() - 1;
}

std::size_t ParamStore::index_of(const std::string& name) const {
  auto it = by_name_.find(name);
  if (it == by_name_.end()) throw RangeError("unknown parameter: " + name);
  return it->second;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += static_cast<std::size_t>(p.value.size());
  return n;
}

Gradients ParamStore::zero_gradients() const {
  Gradients g;
  g.reserve(params_.size());
  for (const auto& p : params_) g.push_back(Tensor2D::Zero(p.value.rows(), p.value.cols()));
  return g;
}

std::uint64_t ParamStore::checksum() const {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& p : params_) {
    mix(p.name.data(), p.name.size());
    mix(p.value.data(), static_cast<std::size_t>(p.value.size()) * sizeof(double));
  }
  return h;
}

Var Binding::operator()(std::size_t index) {
  auto& slot = vars_.at(index);
  if (!slot) {
    const Parameter& p = store_[index];
    slot = tape_.external(p.value, p.trainable);
  }
  return *slot;
}

void Binding::accumulate_into(Gradients& acc) const {
  if (acc.size() != vars_.size()) throw IntegrityError("gradient map does not match parameter store");
  for (std::size_t i = 0; i < vars_.size(); ++i) {
    if (!vars_[i]) continue;
    const Tensor2D& g = tape_.grad(vars_[i]->id);
    if (g.size() != 0) acc[i] += g;
  }
}

Gradients Binding::gradients() const {
  Gradients g = store_.zero_gradients();
  accumulate_into(g);
  return g;
}

void add_into(Gradients& acc, const Gradients& g) {
  if (acc.size() != g.size()) throw IntegrityError("gradient maps differ in size");
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += g[i];
}

double max_abs(const Gradients& g) {
  double m = 0.0;
  for (const auto& t : g) {
    if (t.size() != 0) m = std::max(m, t.cwiseAbs().maxCoeff());
  }
  return m;
}

namespace {

constexpr char kMagic[4] = {'P', 'D', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw IoError("checkpoint: truncated file");
  return v;
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& params, const std::string& metadata) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  os.write(kMagic, 4);
  put<std::uint32_t>(os, kVersion);
  put<std::uint64_t>(os, params.size());
  put<std::uint64_t>(os, metadata.size());
  os.write(metadata.data(), static_cast<std::streamsize>(metadata.size()));
  for (const Parameter& p : params) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(p.name.size()));
    os.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put<std::uint64_t>(os, static_cast<std::uint64_t>(p.value.rows()));
    put<std::uint64_t>(os, static_cast<std::uint64_t>(p.value.cols()));
    put<std::uint8_t>(os, p.trainable ? 1 : 0);
    os.write(reinterpret_cast<const char*>(p.value.data()),
             static_cast<std::streamsize>(p.value.size() * sizeof(double)));
  }
  if (!os) throw IoError("write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0) throw IoError("not a checkpoint: " + path);
  const auto version = get<std::uint32_t>(is);
  if (version != kVersion) throw IoError("unsupported checkpoint version " + std::to_string(version));
  const auto count = get<std::uint64_t>(is);
  const auto meta_len = get<std::uint64_t>(is);
  Checkpoint ck;
  ck.metadata.resize(meta_len);
  is.read(ck.metadata.data(), static_cast<std::streamsize>(meta_len));
  for (std::uint64_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint32_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto rows = get<std::uint64_t>(is);
    const auto cols = get<std::uint64_t>(is);
    const bool trainable = get<std::uint8_t>(is) != 0;
    Tensor2D value(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    is.read(reinterpret_cast<char*>(value.data()),
            static_cast<std::streamsize>(value.size() * sizeof(double)));
    if (!is) throw IoError("checkpoint: truncated payload for " + name);
    ck.params.add(std::move(name), std::move(value), trainable);
  }
  return ck;
}

}  // namespace pdraft
