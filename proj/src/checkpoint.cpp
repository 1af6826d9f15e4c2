#include "prrg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace prrg {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {
constexpr const char* kMagic = "PRRG-CHECKPOINT 1";
constexpr const char* kBnMean = "vis.bn.running_mean";
constexpr const char* kBnVar = "vis.bn.running_var";

std::string read_line(std::istream& in, const std::string& path) {
  std::string line;
  if (!std::getline(in, line)) throw CheckpointError(path + ": truncated checkpoint");
  return line;
}
}  // namespace

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw CheckpointError("checkpoint has no tensor named " + name);
}

void write_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  // Write to a sibling file and rename so a crash never leaves a torn checkpoint.
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write " + tmp);
    out << kMagic << '\n' << "meta " << ckpt.meta.size() << '\n';
    for (const auto& [k, v] : ckpt.meta) {
      if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos)
        throw CheckpointError("metadata entry '" + k + "' contains a reserved character");
      out << k << '=' << v << '\n';
    }
    out << "tensors " << ckpt.tensors.size() << '\n';
    for (const auto& [name, t] : ckpt.tensors) {
      out << name << ' ' << t.rank();
      for (auto d : t.shape()) out << ' ' << d;
      out << '\n';
      const auto data = t.data();
      out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    }
    if (!out) throw CheckpointError("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path);
  if (read_line(in, path) != kMagic) throw CheckpointError(path + ": not a checkpoint (bad header)");
  Checkpoint ckpt;
  auto count_of = [&](const std::string& line, const std::string& key) {
    std::istringstream ss(line);
    std::string k;
    std::size_t n = 0;
    if (!(ss >> k >> n) || k != key) throw CheckpointError(path + ": expected '" + key + " <count>'");
    return n;
  };
  const std::size_t n_meta = count_of(read_line(in, path), "meta");
  for (std::size_t i = 0; i < n_meta; ++i) {
    const std::string line = read_line(in, path);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError(path + ": malformed metadata line '" + line + "'");
    ckpt.meta[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const std::size_t n_tensors = count_of(read_line(in, path), "tensors");
  for (std::size_t i = 0; i < n_tensors; ++i) {
    std::istringstream ss(read_line(in, path));
    std::string name;
    std::size_t rank = 0;
    if (!(ss >> name >> rank)) throw CheckpointError(path + ": malformed tensor header");
    Shape shape(rank);
    for (auto& d : shape)
      if (!(ss >> d)) throw CheckpointError(path + ": malformed shape for " + name);
    std::vector<double> data(shape_numel(shape));
    in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
    if (!in) throw CheckpointError(path + ": truncated data for " + name);
    ckpt.tensors.emplace_back(name, Tensor(std::move(shape), std::move(data)));
  }
  return ckpt;
}

Checkpoint snapshot(const PromptRrgModel& model, std::map<std::string, std::string> meta) {
  Checkpoint ckpt;
  ckpt.meta = std::move(meta);
  for (const auto& [k, v] : model.config().to_map()) ckpt.meta["model." + k] = v;
  for (const auto& p : model.parameters()) ckpt.tensors.emplace_back(p.name, p.tensor.clone());
  const auto& bn = model.vision_bn_state();
  ckpt.tensors.emplace_back(kBnMean, Tensor({bn.running_mean.size()}, bn.running_mean));
  ckpt.tensors.emplace_back(kBnVar, Tensor({bn.running_var.size()}, bn.running_var));
  return ckpt;
}

void load_into(PromptRrgModel& model, const Checkpoint& ckpt) {
  for (auto& p : model.parameters()) {
    const Tensor& src = ckpt.tensor(p.name);
    if (src.shape() != p.tensor.shape())
      throw CheckpointError("shape mismatch for " + p.name + ": checkpoint " + shape_string(src.shape()) +
                            ", model " + shape_string(p.tensor.shape()));
    std::copy(src.data().begin(), src.data().end(), p.tensor.mutable_data().begin());
    p.tensor.zero_grad();
  }
  auto& bn = model.vision_bn_state();
  const Tensor& mean = ckpt.tensor(kBnMean);
  const Tensor& var = ckpt.tensor(kBnVar);
  if (mean.numel() != bn.running_mean.size() || var.numel() != bn.running_var.size())
    throw CheckpointError("batch-norm statistics have the wrong width");
  bn.running_mean.assign(mean.data().begin(), mean.data().end());
  bn.running_var.assign(var.data().begin(), var.data().end());
}

PromptRrgModel restore_model(const Checkpoint& ckpt) {
  std::map<std::string, std::string> cfg;
  for (const auto& [k, v] : ckpt.meta)
    if (k.rfind("model.", 0) == 0) cfg[k.substr(6)] = v;
  PromptRrgModel model(ModelConfig::from_map(cfg), 0);
  load_into(model, ckpt);
  return model;
}

void save_model(const PromptRrgModel& model, const std::string& path, std::map<std::string, std::string> meta) {
  write_checkpoint(snapshot(model, std::move(meta)), path);
}

}  // namespace prrg
