#pragma once

#include "vik/backbone.hpp"
#include "vik/optim.hpp"

#include <string>
#include <utility>
#include <vector>

namespace vik {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointData {
  std::string config_text;  // canonical form
  std::vector<std::pair<std::string, TensorF>> tensors;
  bool has_opt = false;
  std::int64_t opt_step = 0;
  std::vector<TensorF> opt_m, opt_v;  // aligned with tensors
  std::string rng_state;
};

void save_checkpoint(const std::string& path, const CheckpointData& data);
// digest mismatch between header and embedded config -> ConfigError unless force
CheckpointData load_checkpoint(const std::string& path, bool force = false);

// snapshot / restore against a live model, in visit order
CheckpointData snapshot(Backbone<float>& net, const std::string& config_text,
                        const AdamW<float>* opt = nullptr, const std::string& rng_state = {});
void restore(Backbone<float>& net, const CheckpointData& data, AdamW<float>* opt = nullptr);

}  // namespace vik
