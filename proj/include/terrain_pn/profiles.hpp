#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

#include "terrain_pn/model.hpp"
#include "terrain_pn/train.hpp"

namespace terrain_pn {

/// Named run scales. Everything not overridden on the command line comes from here.
struct Profile {
  std::string name;
  std::size_t samples = 0;
  std::size_t points = 0;
  int epochs = 0;
  std::size_t feature_length = 256;

  TrainConfig train_config(std::uint64_t seed) const {
    TrainConfig c;
    c.epochs = epochs;
    c.seed = seed;
    return c;
  }
  ModelSpec model_spec() const { return ModelSpec::directional(feature_length); }
};

inline Profile desk_profile() { return {"desk", 600, 512, 30, 256}; }
inline Profile full_profile() { return {"full", 4016, 2048, 60, 256}; }

inline Profile profile_by_name(std::string_view name) {
  if (name == "desk") return desk_profile();
  if (name == "full") return full_profile();
  throw std::invalid_argument("unknown profile '" + std::string(name) + "' (expected desk or full)");
}

}  // namespace terrain_pn
