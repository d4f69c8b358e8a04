#include "gia/fed_client.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>

#include "gia/errors.hpp"

namespace gia::fed {

using nn::Mode;

void ClientUpdate::validate(const nn::ModelParams& params) const {
  if (gradients.size() != params.size()) throw PreconditionError("update gradient count differs from model");
  for (std::size_t i = 0; i < gradients.size(); ++i) {
    const auto& p = params.entries()[i];
    if (gradients[i].name != p.name) {
      throw PreconditionError("update gradient '" + gradients[i].name + "' where model expects '" + p.name + "'");
    }
    if (gradients[i].value.shape() != p.value.shape()) {
      throw ShapeError("update gradient '" + p.name + "' has shape " + shape_str(gradients[i].value.shape()));
    }
  }
  if (labels.size() != batch_size || batch_size == 0) throw PreconditionError("update labels do not match batch size");
  if (stats_before.has_value() != stats_after.has_value()) {
    throw PreconditionError("update carries only one running-statistics snapshot");
  }
}

nn::RunningStats advance_running_stats(const nn::RunningStats& before, const nn::BatchStats& batch, double m) {
  if (before.size() != batch.size()) throw PreconditionError("running and batch statistics cover different layers");
  nn::RunningStats after = before;
  for (std::size_t l = 0; l < before.size(); ++l) {
    if (before[l].layer != batch[l].layer) throw PreconditionError("layer order mismatch at " + batch[l].layer);
    const auto unbiased = nn::unbiased_from_biased(batch[l].var_biased, batch[l].n);
    for (std::size_t c = 0; c < before[l].mean.numel(); ++c) {
      after[l].mean[c] = (1.0 - m) * before[l].mean[c] + m * batch[l].mean[c];
      after[l].var[c] = (1.0 - m) * before[l].var[c] + m * unbiased[c];
    }
  }
  return after;
}

ClientUpdate client_step(const nn::Architecture& arch, const nn::ModelParams& params, const nn::Batch& batch,
                         const SharingPolicy& policy, const nn::RunningStats& running) {
  if (batch.size() == 0) throw PreconditionError("client batch is empty");
  auto result = nn::loss_and_gradients(arch, params, batch, policy.mode, running);

  ClientUpdate u;
  u.gradients = std::move(result.gradients);
  u.mode = policy.mode;
  u.batch_size = batch.size();
  u.labels = batch.labels;
  u.momentum = arch.config().bn_momentum;
  for (const auto& s : result.batch_stats) u.n_per_channel.emplace_back(s.layer, s.n);
  if (policy.share_running_stats) {
    u.stats_before = running;
    u.stats_after = policy.mode == Mode::Training ? advance_running_stats(running, result.batch_stats, u.momentum)
                                                  : running;
  }
  return u;
}

const Tensor* Container::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e.value;
  }
  return nullptr;
}

const Tensor& Container::get(const std::string& name) const {
  const Tensor* t = find(name);
  if (t == nullptr) throw PreconditionError("container has no entry '" + name + "'");
  return *t;
}

double Container::scalar(const std::string& name) const {
  const Tensor& t = get(name);
  if (t.numel() != 1) throw PreconditionError("container entry '" + name + "' is not a scalar");
  return t[0];
}

namespace {

constexpr char kMagic[4] = {'G', 'I', 'A', 'U'};

template <typename U>
void put(std::ostream& out, U v) {
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(bytes, sizeof(U));
}

template <typename U>
U take(std::istream& in) {
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) throw RuntimeFailure("container truncated");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

constexpr std::uint64_t kMaxElements = std::uint64_t{1} << 32;

}  // namespace

void write_container(std::ostream& out, const Container& c) {
  out.write(kMagic, 4);
  put<std::uint32_t>(out, Container::kVersion);
  put<std::uint64_t>(out, c.entries.size());
  for (const auto& e : c.entries) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(e.value.rank()));
    for (auto d : e.value.shape()) put<std::uint64_t>(out, d);
    for (double v : e.value.storage()) put<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
  if (!out) throw RuntimeFailure("container write failed");
}

Container read_container(std::istream& in) {
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != std::string(kMagic, 4)) {
    throw RuntimeFailure("not a GIAU container");
  }
  const auto version = take<std::uint32_t>(in);
  if (version != Container::kVersion) throw RuntimeFailure("unsupported container version " + std::to_string(version));
  const auto count = take<std::uint64_t>(in);
  Container c;
  std::set<std::string> seen;
  for (std::uint64_t k = 0; k < count; ++k) {
    const auto len = take<std::uint32_t>(in);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw RuntimeFailure("container truncated in entry name");
    if (!seen.insert(name).second) throw RuntimeFailure("duplicate container entry '" + name + "'");
    const auto rank = take<std::uint32_t>(in);
    if (rank > 8) throw RuntimeFailure("entry '" + name + "' has implausible rank");
    Shape shape;
    std::uint64_t total = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      shape.push_back(take<std::uint64_t>(in));
      total *= shape.back();
      if (total > kMaxElements) throw RuntimeFailure("entry '" + name + "' is too large");
    }
    std::vector<double> data(total);
    for (auto& v : data) v = std::bit_cast<double>(take<std::uint64_t>(in));
    c.add(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return c;
}

void save_container(const std::string& path, const Container& c) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw RuntimeFailure("cannot open '" + path + "' for writing");
  write_container(out, c);
}

Container load_container(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw PreconditionError("cannot open '" + path + "'");
  return read_container(in);
}

void encode_running_stats(Container& c, const std::string& prefix, const nn::RunningStats& stats) {
  c.add_scalar(prefix + "layers", static_cast<double>(stats.size()));
  for (const auto& s : stats) {
    c.add(prefix + s.layer + "/mean", s.mean);
    c.add(prefix + s.layer + "/var", s.var);
  }
}

nn::RunningStats decode_running_stats(const Container& c, const std::string& prefix) {
  nn::RunningStats out;
  for (const auto& e : c.entries) {
    if (!e.name.starts_with(prefix) || !e.name.ends_with("/mean")) continue;
    const std::string layer = e.name.substr(prefix.size(), e.name.size() - prefix.size() - 5);
    out.push_back({layer, e.value, c.get(prefix + layer + "/var")});
  }
  if (out.size() != static_cast<std::size_t>(c.scalar(prefix + "layers"))) {
    throw RuntimeFailure("running statistics under '" + prefix + "' are incomplete");
  }
  return out;
}

Container encode_update(const ClientUpdate& u) {
  Container c;
  c.add_scalar("meta/mode", u.mode == Mode::Training ? 0.0 : 1.0);
  c.add_scalar("meta/batch_size", static_cast<double>(u.batch_size));
  c.add_scalar("meta/momentum", u.momentum);
  Tensor labels({u.labels.size()});
  for (std::size_t i = 0; i < u.labels.size(); ++i) labels[i] = static_cast<double>(u.labels[i]);
  c.add("meta/labels", labels);
  for (const auto& [layer, n] : u.n_per_channel) c.add_scalar("n/" + layer, static_cast<double>(n));
  for (const auto& gr : u.gradients) c.add("grad/" + gr.name, gr.value);
  if (u.has_stats()) {
    encode_running_stats(c, "stats_before/", *u.stats_before);
    encode_running_stats(c, "stats_after/", *u.stats_after);
  }
  return c;
}

namespace {

std::size_t as_count(double v, const std::string& what) {
  if (!(v >= 0.0) || v != std::floor(v) || v > 1e15) throw RuntimeFailure("bad " + what + " in container");
  return static_cast<std::size_t>(v);
}

}  // namespace

ClientUpdate decode_update(const Container& c) {
  ClientUpdate u;
  const double mode = c.scalar("meta/mode");
  if (mode != 0.0 && mode != 1.0) throw RuntimeFailure("bad mode flag in container");
  u.mode = mode == 0.0 ? Mode::Training : Mode::Inference;
  u.batch_size = as_count(c.scalar("meta/batch_size"), "batch size");
  u.momentum = c.scalar("meta/momentum");
  for (double v : c.get("meta/labels").storage()) u.labels.push_back(as_count(v, "label"));
  for (const auto& e : c.entries) {
    if (e.name.starts_with("grad/")) u.gradients.push_back({e.name.substr(5), e.value});
    if (e.name.starts_with("n/")) u.n_per_channel.emplace_back(e.name.substr(2), as_count(e.value.item(), "n"));
  }
  if (c.find("stats_before/layers") != nullptr) {
    u.stats_before = decode_running_stats(c, "stats_before/");
    u.stats_after = decode_running_stats(c, "stats_after/");
  }
  return u;
}

}  // namespace gia::fed
