#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "prrg/model.hpp"

namespace prrg {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Text header, key=value metadata, then named tensor blocks:
///
///   PRRG-CHECKPOINT 1
///   meta <count>
///   key=value ...
///   tensors <count>
///   <name> <rank> <dims...>\n<raw little-endian doubles>
///
/// Metadata carries the model configuration under "model." keys plus any
/// caller-supplied entries (vocabulary fingerprint, prompt mode, ...).
struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& tensor(const std::string& name) const;
};

void write_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint read_checkpoint(const std::string& path);

/// Parameters, BN running statistics and model config of `model`, merged
/// with `meta`.
Checkpoint snapshot(const PromptRrgModel& model, std::map<std::string, std::string> meta = {});
/// Rebuilds a model from a snapshot; every parameter must be present.
PromptRrgModel restore_model(const Checkpoint& ckpt);
/// Overwrites parameters and BN statistics of an existing model in place.
void load_into(PromptRrgModel& model, const Checkpoint& ckpt);

void save_model(const PromptRrgModel& model, const std::string& path, std::map<std::string, std::string> meta = {});

}  // namespace prrg
