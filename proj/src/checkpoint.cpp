#include "nrnm/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include <fmt/format.h>

#include "nrnm/errors.hpp"

namespace nrnm {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'N', 'R', 'N', 'M', 'C', 'K', 'P', '1'};

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(std::istream& in, const std::filesystem::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw ParseError("truncated checkpoint " + path.string());
  }
  return v;
}

}  // namespace

Parameter& ParameterStore::add(std::string name, Tensor init) {
  if (find(name)) throw ConfigError(name, "parameter registered twice");
  params_.push_back(std::make_unique<Parameter>(std::move(name), std::move(init)));
  return *params_.back();
}

Parameter* ParameterStore::find(const std::string& name) {
  for (auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

const Parameter* ParameterStore::find(const std::string& name) const {
  for (const auto& p : params_)
    if (p->name == name) return p.get();
  return nullptr;
}

Parameter& ParameterStore::get(const std::string& name) {
  Parameter* p = find(name);
  if (!p) throw ConfigError(name, "no such parameter");
  return *p;
}

std::size_t ParameterStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

void ParameterStore::quantize(Precision precision) {
  for (auto& p : params_) p->value.quantize(precision);
}

std::vector<Tensor> ParameterStore::snapshot() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p->value);
  return out;
}

void ParameterStore::restore(const std::vector<Tensor>& values) {
  if (values.size() != params_.size()) {
    throw DimensionError(fmt::format("restore: {} tensors for {} parameters", values.size(), params_.size()));
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (values[i].shape() != params_[i]->value.shape()) {
      throw_shape_mismatch("restore", params_[i]->value.shape(), values[i].shape());
    }
    params_[i]->value = values[i];
  }
}

void save_checkpoint(const ParameterStore& store, const std::filesystem::path& path, Precision precision) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out.write(kMagic, sizeof(kMagic));
  put<std::uint8_t>(out, precision == Precision::F32 ? 4 : 8);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(store.all().size()));
  for (const auto& p : store.all()) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p->value.rank()));
    for (std::size_t d : p->value.shape()) put<std::uint64_t>(out, d);
    for (double v : p->value.storage()) {
      if (precision == Precision::F32) {
        put<float>(out, static_cast<float>(v));
      } else {
        put<double>(out, v);
      }
    }
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Precision load_checkpoint(ParameterStore& store, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("checkpoint", "cannot open " + path.string());
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw ParseError("not a checkpoint file: " + path.string());
  }
  const auto width = take<std::uint8_t>(in, path);
  if (width != 4 && width != 8) throw ParseError(fmt::format("bad value width {} in {}", width, path.string()));
  const auto count = take<std::uint32_t>(in, path);
  if (count != store.all().size()) {
    throw ConfigError("checkpoint", fmt::format("{} holds {} parameters, model has {}", path.string(), count,
                                                store.all().size()));
  }
  std::vector<Tensor> values;
  values.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = take<std::uint32_t>(in, path);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw ParseError("truncated checkpoint " + path.string());
    const Parameter& expected = *store.all()[i];
    if (name != expected.name) {
      throw ConfigError("checkpoint", fmt::format("parameter {} is '{}', model expects '{}'", i, name, expected.name));
    }
    const auto rank = take<std::uint32_t>(in, path);
    Shape shape(rank);
    for (auto& d : shape) d = take<std::uint64_t>(in, path);
    if (shape != expected.value.shape()) {
      throw ConfigError("checkpoint", fmt::format("parameter '{}' has shape {}, model expects {}", name,
                                                  to_string(shape), to_string(expected.value.shape())));
    }
    Tensor t(shape);
    for (double& v : t.storage()) v = width == 4 ? static_cast<double>(take<float>(in, path)) : take<double>(in, path);
    values.push_back(std::move(t));
  }
  store.restore(values);
  return width == 4 ? Precision::F32 : Precision::F64;
}

}  // namespace nrnm
