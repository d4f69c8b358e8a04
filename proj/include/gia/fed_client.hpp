#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "gia/model.hpp"

namespace gia::fed {

struct SharingPolicy {
  nn::Mode mode = nn::Mode::Training;
  bool share_running_stats = true;
};

// What the server observes after one local step.
struct ClientUpdate {
  std::vector<nn::NamedTensor> gradients;  // ModelParams order
  std::optional<nn::RunningStats> stats_before;
  std::optional<nn::RunningStats> stats_after;
  nn::Mode mode = nn::Mode::Training;
  std::size_t batch_size = 0;
  std::vector<std::size_t> labels;
  double momentum = 0.1;
  std::vector<std::pair<std::string, std::size_t>> n_per_channel;  // per BN layer

  bool has_stats() const { return stats_before.has_value() && stats_after.has_value(); }
  void validate(const nn::ModelParams& params) const;
};

// One local step over the whole batch. `running` holds the statistics before
// the step; in training mode they advance once by the momentum rule.
ClientUpdate client_step(const nn::Architecture& arch, const nn::ModelParams& params, const nn::Batch& batch,
                         const SharingPolicy& policy, const nn::RunningStats& running);

// Running statistics after one training-mode step from `before`.
nn::RunningStats advance_running_stats(const nn::RunningStats& before, const nn::BatchStats& batch, double m);

// Flat binary container of named tensors, little-endian:
//   "GIAU" | u32 version | u64 entry count
//   per entry: u32 name length | name bytes | u32 rank | u64 dims[rank] | f64 payload
struct Container {
  static constexpr std::uint32_t kVersion = 1;
  std::vector<nn::NamedTensor> entries;

  void add(std::string name, Tensor value) { entries.push_back({std::move(name), std::move(value)}); }
  void add_scalar(std::string name, double v) { add(std::move(name), Tensor::scalar(v)); }
  const Tensor* find(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  double scalar(const std::string& name) const;
};

void write_container(std::ostream& out, const Container& c);
Container read_container(std::istream& in);
void save_container(const std::string& path, const Container& c);
Container load_container(const std::string& path);

Container encode_update(const ClientUpdate& update);
ClientUpdate decode_update(const Container& c);

// Running statistics under the "<prefix><layer>/mean|var" naming used by the encoders.
void encode_running_stats(Container& c, const std::string& prefix, const nn::RunningStats& stats);
nn::RunningStats decode_running_stats(const Container& c, const std::string& prefix);

}  // namespace gia::fed
