#pragma once

// Named parameter registry and its on-disk container.
//
// Checkpoint layout (little-endian):
//   8 bytes   magic "NRNMCKP1"
//   u8        value width in bytes: 4 (f32) or 8 (f64)
//   u32       parameter count
//   per parameter, in registration order:
//     u32 name length, name bytes (UTF-8, no terminator)
//     u32 rank, rank x u64 extents
//     product(extents) IEEE-754 values, row-major
// Loading at the stored width restores the values bit-exactly.

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "nrnm/autograd.hpp"

namespace nrnm {

class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore&) = delete;
  ParameterStore& operator=(const ParameterStore&) = delete;
  ParameterStore(ParameterStore&&) = default;
  ParameterStore& operator=(ParameterStore&&) = default;

  // Throws ConfigError on duplicate names. The reference stays valid for the
  // lifetime of the store.
  Parameter& add(std::string name, Tensor init);
  Parameter* find(const std::string& name);
  const Parameter* find(const std::string& name) const;
  Parameter& get(const std::string& name);

  const std::vector<std::unique_ptr<Parameter>>& all() const { return params_; }
  std::size_t scalar_count() const;

  void zero_grad();
  void quantize(Precision p);

  std::vector<Tensor> snapshot() const;
  void restore(const std::vector<Tensor>& values);

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
};

void save_checkpoint(const ParameterStore& store, const std::filesystem::path& path, Precision precision);

// Replaces the values of every parameter in store. The file must hold exactly
// the same names and shapes; anything else is a ConfigError.
Precision load_checkpoint(ParameterStore& store, const std::filesystem::path& path);

}  // namespace nrnm
