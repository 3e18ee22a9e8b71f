#include "tpt/errors.hpp"
#include "tpt/training.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace tpt {
namespace {

using ordered_json = nlohmann::ordered_json;

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(const char* p) {
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(static_cast<unsigned char>(p[i])) << (8 * i);
  return value;
}

void put_doubles(std::string& out, const RowMatrix& m) {
  const std::size_t offset = out.size();
  out.resize(offset + sizeof(double) * static_cast<std::size_t>(m.size()));
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(out.data() + offset, m.data(), sizeof(double) * static_cast<std::size_t>(m.size()));
  } else {
    std::string bytes;
    for (Index i = 0; i < m.size(); ++i) put_le(bytes, std::bit_cast<std::uint64_t>(m.data()[i]));
    std::memcpy(out.data() + offset, bytes.data(), bytes.size());
  }
}

void get_doubles(const char* p, RowMatrix& m) {
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(m.data(), p, sizeof(double) * static_cast<std::size_t>(m.size()));
  } else {
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = std::bit_cast<double>(get_le<std::uint64_t>(p + 8 * i));
  }
}

struct ArrayRef {
  std::string name;
  const Tensor* tensor;
};

template <typename Json>
const Json& require(const Json& j, const char* key) {
  if (!j.is_object() || !j.contains(key)) throw ConfigError(std::string("missing field \"") + key + "\"");
  return j.at(key);
}

}  // namespace

ordered_json to_json(const ModelConfig& c) {
  return {{"d_z", c.d_z},
          {"d_f", c.d_f},
          {"heads", c.heads},
          {"layers", c.layers},
          {"vocab_size", c.vocab_size},
          {"max_src_len", c.max_src_len},
          {"max_tgt_len", c.max_tgt_len},
          {"role_binding", c.role_binding},
          {"ln_eps", c.ln_eps}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_z = require(j, "d_z").get<Index>();
  c.d_f = require(j, "d_f").get<Index>();
  c.heads = require(j, "heads").get<Index>();
  c.layers = require(j, "layers").get<Index>();
  c.vocab_size = require(j, "vocab_size").get<Index>();
  c.max_src_len = require(j, "max_src_len").get<Index>();
  c.max_tgt_len = require(j, "max_tgt_len").get<Index>();
  c.role_binding = require(j, "role_binding").get<bool>();
  c.ln_eps = require(j, "ln_eps").get<double>();
  return c;
}

ordered_json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"beta1", c.beta1},           {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},           {"clip_norm", c.clip_norm},   {"batch_size", c.batch_size},
          {"max_steps", c.max_steps},         {"eval_every", c.eval_every}, {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rate = require(j, "learning_rate").get<double>();
  c.beta1 = require(j, "beta1").get<double>();
  c.beta2 = require(j, "beta2").get<double>();
  c.adam_eps = require(j, "adam_eps").get<double>();
  c.clip_norm = require(j, "clip_norm").get<double>();
  c.batch_size = require(j, "batch_size").get<Index>();
  c.max_steps = require(j, "max_steps").get<Index>();
  c.eval_every = require(j, "eval_every").get<Index>();
  c.seed = require(j, "seed").get<std::uint64_t>();
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::vector<ArrayRef> arrays;
  for (const auto& [name, t] : ckpt.model.params) arrays.push_back({"param/" + name, &t});
  for (const auto& [name, t] : ckpt.optimizer.m) arrays.push_back({"adam_m/" + name, &t});
  for (const auto& [name, t] : ckpt.optimizer.v) arrays.push_back({"adam_v/" + name, &t});

  ordered_json directory = ordered_json::array();
  std::uint64_t offset = 0;
  for (const ArrayRef& a : arrays) {
    const auto count = static_cast<std::uint64_t>(a.tensor->size());
    directory.push_back({{"name", a.name}, {"shape", a.tensor->shape()}, {"offset", offset}, {"count", count}});
    offset += count;
  }
  const ordered_json header = {{"config", to_json(ckpt.model.config)},
                               {"vocab", ckpt.vocab.symbols()},
                               {"step", ckpt.optimizer.step},
                               {"run_config", ckpt.run_config},
                               {"arrays", directory}};
  const std::string header_text = header.dump();

  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  put_le(out, kCheckpointVersion);
  put_le(out, static_cast<std::uint64_t>(header_text.size()));
  out += header_text;
  for (const ArrayRef& a : arrays) put_doubles(out, a.tensor->mat());

  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw IoError("cannot open checkpoint for writing", path.string());
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  file.flush();
  if (!file) throw IoError("checkpoint write failed", path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw IoError("cannot open checkpoint", path.string());
  std::ostringstream buffer;
  buffer << file.rdbuf();
  const std::string bytes = std::move(buffer).str();

  constexpr std::size_t kPrefix = sizeof(kCheckpointMagic) + 4 + 8;
  if (bytes.size() < sizeof(kCheckpointMagic) ||
      std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) {
    throw FormatError(path.string() + ": not a checkpoint (bad magic)");
  }
  if (bytes.size() < kPrefix) throw FormatError(path.string() + ": truncated header");
  const auto version = get_le<std::uint32_t>(bytes.data() + 8);
  if (version != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  const auto header_len = get_le<std::uint64_t>(bytes.data() + 12);
  if (header_len > bytes.size() - kPrefix) throw FormatError(path.string() + ": truncated header");
  const std::size_t data_start = kPrefix + static_cast<std::size_t>(header_len);

  Checkpoint ckpt;
  try {
    const ordered_json header = ordered_json::parse(bytes.begin() + kPrefix, bytes.begin() + data_start);
    ckpt.model.config = model_config_from_json(nlohmann::json(require(header, "config")));
    ckpt.model.config.validate();
    ckpt.vocab = Vocabulary::from_symbols(require(header, "vocab").get<std::vector<std::string>>());
    ckpt.optimizer.step = require(header, "step").get<Index>();
    ckpt.run_config = require(header, "run_config");

    const std::size_t available = (bytes.size() - data_start) / sizeof(double);
    std::uint64_t expected_offset = 0;
    for (const auto& entry : require(header, "arrays")) {
      const auto name = require(entry, "name").get<std::string>();
      const auto shape = require(entry, "shape").get<Shape>();
      const auto offset = require(entry, "offset").get<std::uint64_t>();
      const auto count = require(entry, "count").get<std::uint64_t>();
      if (offset != expected_offset || count != static_cast<std::uint64_t>(shape_numel(shape))) {
        throw FormatError(path.string() + ": inconsistent directory entry for " + name);
      }
      if (offset + count > available) throw FormatError(path.string() + ": truncated data for " + name);
      expected_offset += count;
      Tensor t(shape);
      get_doubles(bytes.data() + data_start + offset * sizeof(double), t.mat());
      const std::size_t slash = name.find('/');
      const std::string kind = name.substr(0, slash);
      const std::string key = slash == std::string::npos ? "" : name.substr(slash + 1);
      ParamMap* target = kind == "param"    ? &ckpt.model.params
                         : kind == "adam_m" ? &ckpt.optimizer.m
                         : kind == "adam_v" ? &ckpt.optimizer.v
                                            : nullptr;
      if (!target || key.empty()) throw FormatError(path.string() + ": unknown array " + name);
      target->emplace(key, std::move(t));
    }
    if (bytes.size() != data_start + expected_offset * sizeof(double)) {
      throw FormatError(path.string() + ": trailing bytes after array data");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed header: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const VocabularyError& e) {
    throw FormatError(path.string() + ": " + e.what());
  } catch (const DimensionError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }

  for (const ParamSpec& spec : parameter_layout(ckpt.model.config)) {
    const auto it = ckpt.model.params.find(spec.name);
    if (it == ckpt.model.params.end() || it->second.shape() != spec.shape) {
      throw FormatError(path.string() + ": parameter " + spec.name + " missing or misshapen");
    }
  }
  if (ckpt.model.params.size() != parameter_layout(ckpt.model.config).size()) {
    throw FormatError(path.string() + ": unexpected extra parameters");
  }
  if (ckpt.vocab.size() != ckpt.model.config.vocab_size) {
    throw FormatError(path.string() + ": vocabulary size does not match the model");
  }
  return ckpt;
}

void write_metrics(const std::filesystem::path& path, std::span<const MetricRecord> records,
                   const ordered_json& run_config) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open metrics log for writing", path.string());
  if (!run_config.is_null()) out << ordered_json{{"run_config", run_config}}.dump() << '\n';
  for (const MetricRecord& r : records) {
    ordered_json line = {{"step", r.step}, {"loss", r.loss}, {"accuracy", nullptr}};
    if (r.accuracy) line["accuracy"] = *r.accuracy;
    out << line.dump() << '\n';
  }
  out.flush();
  if (!out) throw IoError("metrics write failed", path.string());
}

std::vector<MetricRecord> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open metrics log", path.string());
  std::vector<MetricRecord> records;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (j.contains("run_config")) continue;
      MetricRecord r;
      r.step = j.at("step").get<Index>();
      r.loss = j.at("loss").get<double>();
      if (!j.at("accuracy").is_null()) r.accuracy = j.at("accuracy").get<double>();
      records.push_back(r);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(e.what(), line_no);
    }
  }
  return records;
}

}  // namespace tpt
