#include "metricforge/tensor_io.hpp"
#include "metricforge/training.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace metricforge {
namespace {

using ordered_json = nlohmann::ordered_json;
using json = nlohmann::json;

constexpr const char* kFormat = "metricforge-checkpoint";

std::string hex32(std::uint32_t v) {
  std::ostringstream ss;
  ss << std::hex << std::setw(8) << std::setfill('0') << v;
  return ss.str();
}

std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

Eigen::VectorXd to_eigen(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Index>(v.size()));
}

// Checkpoint tensors alongside each model parameter, in a fixed order.
template <typename F, typename C>
void visit_checkpoint_tensors(F&& f, C& c) {
  visit_model_params([&](const std::string& name, auto& p) { f(name, p); }, c.model);
  visit_model_params([&](const std::string& name, auto& p) { f("adam.first." + name, p); },
                     c.optimizer.first);
  visit_model_params([&](const std::string& name, auto& p) { f("adam.second." + name, p); },
                     c.optimizer.second);
}

template <typename T>
T field(const json& j, const char* key) {
  auto it = j.find(key);
  if (it == j.end()) throw Error(Errc::BadHeader, std::string("index.json lacks '") + key + "'");
  try {
    return it->get<T>();
  } catch (const json::exception& e) {
    throw Error(Errc::BadHeader, std::string("index.json field '") + key + "': " + e.what());
  }
}

}  // namespace

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(Errc::IoFailure, "cannot create " + dir.string() + ": " + ec.message());

  ordered_json index;
  index["format"] = kFormat;
  index["version"] = c.version;
  index["dtype"] = "float32";
  index["byte_order"] = "little";
  index["metric_names"] = c.model.metric_names;
  const EncoderConfig& e = c.model.encoder.config;
  index["encoder"] = {{"input_width", e.input_width}, {"width", e.width},   {"seq_len", e.seq_len},
                      {"heads", e.heads},             {"layers", e.layers}, {"ffn_width", e.ffn_width},
                      {"seed", e.seed}};
  const HeadConfig h = c.model.head.config();
  index["head"] = {{"metrics", h.metrics},
                   {"width", h.width},
                   {"key_width", h.key_width},
                   {"value_width", h.value_width}};
  const HyperParams& hp = c.hyperparams;
  index["hyperparams"] = {{"epochs", hp.epochs},         {"batch_size", hp.batch_size},
                          {"learning_rate", hp.learning_rate}, {"adam_beta1", hp.adam_beta1},
                          {"adam_beta2", hp.adam_beta2}, {"adam_eps", hp.adam_eps},
                          {"seed", hp.seed}};
  index["freeze_encoder"] = c.freeze_encoder;
  index["text_prompt"] = c.text_prompt ? ordered_json(*c.text_prompt) : ordered_json(nullptr);
  index["optimizer"] = {{"name", "adam"}, {"step", c.optimizer.step}};

  ordered_json history = ordered_json::array();
  for (const auto& r : c.history) {
    history.push_back({{"epoch", r.epoch},
                       {"per_metric", to_std(r.per_metric)},
                       {"total", r.total},
                       {"alpha", to_std(r.alpha)}});
  }
  index["history"] = std::move(history);

  ordered_json provenance = ordered_json::array();
  for (const auto& s : c.provenance) {
    provenance.push_back({{"active_metrics", s.active_metrics},
                          {"weighting", s.weighting},
                          {"seed", s.seed},
                          {"dataset_fingerprint", s.dataset_fingerprint},
                          {"epochs", s.epochs}});
  }
  index["provenance"] = std::move(provenance);

  ordered_json tensors = ordered_json::array();
  visit_checkpoint_tensors(
      [&](const std::string& name, const auto& p) {
        const Mat<float> m = p;
        const std::string bytes = encode_payload(m);
        const std::string file = name + ".bin";
        write_file_bytes(dir / file, bytes);
        tensors.push_back({{"name", name},
                           {"file", file},
                           {"shape", {m.rows(), m.cols()}},
                           {"dtype", "float32"},
                           {"offset", 0},
                           {"nbytes", bytes.size()},
                           {"crc32", hex32(crc32(bytes))}});
      },
      c);
  index["tensors"] = std::move(tensors);

  write_file_bytes(dir / "index.json", index.dump(2) + "\n");
}

namespace {

Checkpoint read_checkpoint(const std::filesystem::path& dir) {
  const auto index_path = dir / "index.json";
  if (!std::filesystem::exists(index_path)) {
    throw Error(Errc::IoFailure, "no index.json in " + dir.string());
  }
  json index;
  try {
    index = json::parse(read_file_bytes(index_path));
  } catch (const json::parse_error& e) {
    throw Error(Errc::BadHeader, "index.json is not valid JSON: " + std::string(e.what()));
  }
  if (!index.is_object() || index.value("format", "") != kFormat) {
    throw Error(Errc::BadHeader, "index.json is not a metricforge checkpoint");
  }
  const int version = field<int>(index, "version");
  if (version != kCheckpointVersion) {
    throw Error(Errc::VersionMismatch, "checkpoint version " + std::to_string(version) +
                                           ", expected " + std::to_string(kCheckpointVersion));
  }
  if (field<std::string>(index, "dtype") != "float32") {
    throw Error(Errc::BadHeader, "unsupported checkpoint dtype");
  }

  Checkpoint c;
  c.version = version;
  const json& e = index.at("encoder");
  EncoderConfig enc{field<Index>(e, "input_width"), field<Index>(e, "width"),
                    field<Index>(e, "seq_len"),     field<Index>(e, "heads"),
                    field<Index>(e, "layers"),      field<Index>(e, "ffn_width"),
                    field<std::uint64_t>(e, "seed")};
  const json& h = index.at("head");
  HeadConfig head{field<Index>(h, "metrics"), field<Index>(h, "width"), field<Index>(h, "key_width"),
                  field<Index>(h, "value_width"), 0};
  try {
    validate(enc);
    validate(head);
  } catch (const Error& err) {
    throw Error(Errc::CorruptCheckpoint, err.what());
  }
  c.model.encoder = EncoderWeights<float>::zeros(enc);
  c.model.head = MetricProjectionSet<float>::zeros(head);
  c.model.metric_names = field<std::vector<std::string>>(index, "metric_names");
  if (static_cast<Index>(c.model.metric_names.size()) != head.metrics) {
    throw Error(Errc::CorruptCheckpoint, "metric_names length differs from head metric count");
  }
  c.optimizer = fresh_adam_state(c.model);
  c.optimizer.step = field<long>(index.at("optimizer"), "step");

  const json& hp = index.at("hyperparams");
  c.hyperparams = {field<int>(hp, "epochs"),        field<int>(hp, "batch_size"),
                   field<double>(hp, "learning_rate"), field<double>(hp, "adam_beta1"),
                   field<double>(hp, "adam_beta2"), field<double>(hp, "adam_eps"),
                   field<std::uint64_t>(hp, "seed")};
  c.freeze_encoder = field<bool>(index, "freeze_encoder");
  if (const auto& tp = index.at("text_prompt"); !tp.is_null()) c.text_prompt = tp.get<std::string>();

  for (const auto& r : index.at("history")) {
    c.history.push_back({field<int>(r, "epoch"), to_eigen(r.at("per_metric")),
                         field<double>(r, "total"), to_eigen(r.at("alpha"))});
  }
  for (const auto& s : index.at("provenance")) {
    c.provenance.push_back({field<std::vector<std::string>>(s, "active_metrics"),
                            field<std::string>(s, "weighting"), field<std::uint64_t>(s, "seed"),
                            field<std::string>(s, "dataset_fingerprint"), field<int>(s, "epochs")});
  }

  std::map<std::string, const json*> entries;
  for (const auto& t : index.at("tensors")) entries[field<std::string>(t, "name")] = &t;

  visit_checkpoint_tensors(
      [&](const std::string& name, auto& p) {
        auto it = entries.find(name);
        if (it == entries.end()) throw Error(Errc::CorruptCheckpoint, "missing tensor " + name);
        const json& t = *it->second;
        const auto shape = field<std::vector<Index>>(t, "shape");
        if (shape.size() != 2 || shape[0] != p.rows() || shape[1] != p.cols()) {
          throw Error(Errc::CorruptCheckpoint, "tensor " + name + " has the wrong shape");
        }
        const std::string bytes = read_file_bytes(dir / field<std::string>(t, "file"));
        const auto offset = field<std::size_t>(t, "offset");
        const auto nbytes = field<std::size_t>(t, "nbytes");
        if (offset > bytes.size() || bytes.size() - offset < nbytes ||
            nbytes != static_cast<std::size_t>(p.size()) * 4) {
          throw Error(Errc::ChecksumMismatch, "tensor " + name + " is truncated");
        }
        const std::string_view payload = std::string_view(bytes).substr(offset, nbytes);
        if (hex32(crc32(payload)) != field<std::string>(t, "crc32")) {
          throw Error(Errc::ChecksumMismatch, "tensor " + name + " fails its CRC-32 check");
        }
        p = decode_payload(payload, p.rows(), p.cols());
      },
      c);
  return c;
}

}  // namespace

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  try {
    return read_checkpoint(dir);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::BadHeader, "malformed index.json: " + std::string(e.what()));
  }
}

}  // namespace metricforge
