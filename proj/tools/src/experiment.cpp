#include "ekd/experiment.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <ostream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "ekd/checkpoint.hpp"
#include "ekd/presets.hpp"
#include "ekd/random.hpp"

namespace ekd::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string source_name(DataSource s) {
  switch (s) {
    case DataSource::synthetic: return "synthetic";
    case DataSource::cifar_binary: return "cifar_binary";
    case DataSource::idx: return "idx";
  }
  return "?";
}

DataSource source_from(const std::string& s) {
  if (s == "synthetic") return DataSource::synthetic;
  if (s == "cifar_binary") return DataSource::cifar_binary;
  if (s == "idx") return DataSource::idx;
  throw UsageError("data.source: unknown source '" + s + "' (synthetic, cifar_binary, idx)");
}

std::string within_name(loss::WithinStreamMode m) {
  return m == loss::WithinStreamMode::simplified ? "simplified" : "full_pairwise";
}

loss::WithinStreamMode within_from(const std::string& s) {
  if (s == "simplified") return loss::WithinStreamMode::simplified;
  if (s == "full_pairwise") return loss::WithinStreamMode::full_pairwise;
  throw UsageError("train.within_stream_mode: unknown mode '" + s + "'");
}

// Reads the keys of one JSON object, rejecting anything not consumed.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw UsageError(where() + "expected an object");
  }
  ~Reader() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, _] : j_.items()) {
      if (!seen_.count(key)) throw UsageError("unknown key '" + path_ + key + "'");
    }
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    out = convert<T>(*it, key);
  }

  template <typename T>
  void get_optional(const std::string& key, std::optional<T>& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    if (it->is_null()) {
      out.reset();
    } else {
      out = convert<T>(*it, key);
    }
  }

  /// Nested object; returns nullptr when absent.
  const json* object(const std::string& key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

 private:
  std::string where() const { return path_.empty() ? "config: " : path_ + ": "; }

  template <typename T>
  T convert(const json& v, const std::string& key) const {
    const std::string name = path_ + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw UsageError(name + ": expected a boolean");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw UsageError(name + ": expected an integer");
      if (std::is_unsigned_v<T> && v.is_number_integer() && !v.is_number_unsigned() &&
          v.get<long long>() < 0) {
        throw UsageError(name + ": expected a non-negative integer");
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw UsageError(name + ": expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw UsageError(name + ": expected a string");
    } else {
      if (!v.is_array()) throw UsageError(name + ": expected an array");
    }
    try {
      return v.get<T>();
    } catch (const json::exception& e) {
      throw UsageError(name + ": " + e.what());
    }
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

json optional_json(const auto& o) { return o ? json(*o) : json(nullptr); }

void read_train(const json& j, train::TrainConfig& t) {
  Reader r(j, "train.");
  r.get("batch_size", t.batch_size);
  r.get("data_workers", t.data_workers);
  r.get("lr_initial", t.lr_initial);
  r.get("lr_decay_epochs", t.lr_decay_epochs);
  r.get("lr_decay_factor", t.lr_decay_factor);
  r.get("momentum", t.momentum);
  r.get("weight_decay", t.weight_decay);
  r.get("temperature", t.temperature);
  r.get("seed", t.seed);
  r.get("total_epochs", t.total_epochs);
  std::string mode = train::to_string(t.teacher_mode);
  r.get("teacher_mode", mode);
  try {
    t.teacher_mode = train::teacher_mode_from_string(mode);
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("train.teacher_mode: ") + e.what());
  }
  r.get("guided_teacher", t.guided_teacher);
  r.get("guided_student", t.guided_student);
  r.get_optional("guided_pairs", t.guided_pairs);
  r.get("within_stream", t.within_stream);
  std::string wmode = within_name(t.within_stream_mode);
  r.get("within_stream_mode", wmode);
  t.within_stream_mode = within_from(wmode);
  r.get("t2_scaling", t.t2_scaling);
  if (const json* w = r.object("loss_weights")) {
    Reader lw(*w, "train.loss_weights.");
    lw.get("distill", t.loss_weights.distill);
    lw.get("feature", t.loss_weights.feature);
    lw.get("guided_kl", t.loss_weights.guided_kl);
    lw.get("guided_feature", t.loss_weights.guided_feature);
    lw.get("classification", t.loss_weights.classification);
  }
  r.get("desync", t.desync);
  r.get_optional("student_init_seed", t.student_init_seed);
}

void read_data(const json& j, DatasetSpec& d) {
  Reader r(j, "data.");
  std::string src = source_name(d.source);
  r.get("source", src);
  d.source = source_from(src);
  r.get("num_classes", d.num_classes);
  r.get("resolution", d.resolution);
  r.get("channels", d.channels);
  r.get("train_per_class", d.train_per_class);
  r.get("test_per_class", d.test_per_class);
  r.get("synth_seed", d.synth_seed);
  r.get("noise", d.noise);
  r.get("max_mix", d.max_mix);
  r.get("variant", d.variant);
  r.get("train_path", d.train_path);
  r.get("test_path", d.test_path);
  r.get("train_labels", d.train_labels);
  r.get("test_labels", d.test_labels);
  r.get("retain_fraction", d.retain_fraction);
  r.get("subset_seed", d.subset_seed);
  r.get_optional("downsample_to", d.downsample_to);
  if (const json* n = r.object("normalization")) {
    if (n->is_null()) {
      d.normalization.reset();
    } else {
      data::Normalization norm;
      Reader nr(*n, "data.normalization.");
      nr.get("mean", norm.mean);
      nr.get("std", norm.stddev);
      d.normalization = norm;
    }
  }
  if (const json* a = r.object("augmentation")) {
    Reader ar(*a, "data.augmentation.");
    ar.get("enabled", d.augmentation.enabled);
    ar.get("crop_padding", d.augmentation.crop_padding);
    ar.get("horizontal_flip", d.augmentation.horizontal_flip);
  }
}

data::CifarVariant cifar_variant(const std::string& v) {
  if (v == "cifar10") return data::CifarVariant::cifar10;
  if (v == "cifar100") return data::CifarVariant::cifar100;
  throw UsageError("data.variant: expected cifar10 or cifar100, got '" + v + "'");
}

train::TrainConfig checked_train(const train::TrainConfig& t) {
  try {
    t.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return t;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw std::runtime_error("cannot write '" + path.string() + "'");
}

// Sidecar next to each checkpoint: the effective config and the epoch it holds.
train::RunOptions run_options(const ExperimentConfig& config, const fs::path& dir) {
  train::RunOptions opt;
  opt.run_dir = dir;
  opt.write_sidecar = [config_json = json::parse(to_json(config))](
                          const fs::path& checkpoint, std::size_t epoch, const std::string& kind) {
    json side{{"checkpoint", checkpoint.filename().string()},
              {"kind", kind},
              {"epoch", epoch},
              {"config", config_json}};
    fs::path p = checkpoint;
    p += ".json";
    write_text(p, side.dump(2) + "\n");
  };
  return opt;
}

train::RunOptions logged(train::RunOptions opt, std::ostream& log, const std::string& label) {
  opt.on_epoch = [&log, label](const train::EpochMetrics& m) {
    char buf[200];
    if (m.has_teacher) {
      std::snprintf(buf, sizeof buf, "%s epoch %zu lr %.4g student %.4f teacher %.4f gap %+.4f (%.1fs)",
                    label.c_str(), m.epoch, m.lr, m.student_test_acc, m.teacher_test_acc,
                    m.capability_gap, m.seconds);
    } else {
      std::snprintf(buf, sizeof buf, "%s epoch %zu lr %.4g test %.4f (%.1fs)", label.c_str(),
                    m.epoch, m.lr, m.student_test_acc, m.seconds);
    }
    log << buf << std::endl;
  };
  return opt;
}

void load_fixed_teacher(train::TrainState& state, const ExperimentConfig& config) {
  if (config.teacher_checkpoint.empty()) {
    throw UsageError("teacher_mode=fixed requires teacher_checkpoint (see the pretrain command)");
  }
  if (!fs::exists(config.teacher_checkpoint)) {
    throw UsageError("teacher checkpoint '" + config.teacher_checkpoint + "' does not exist");
  }
  const auto ckpt = io::read_checkpoint(config.teacher_checkpoint);
  try {
    // Guided heads the configuration does not use may be present in the file.
    io::load_into(ckpt, state.teacher->named_tensors(), true);
  } catch (const io::CheckpointError& e) {
    throw io::CheckpointError("teacher checkpoint '" + config.teacher_checkpoint +
                              "' does not match the " + config.teacher_preset +
                              " stream: " + e.what());
  }
}

double final_or_nan(const train::RunArtifacts& a, bool teacher) {
  if (a.metrics.empty() || (teacher && !a.metrics.back().has_teacher)) return std::nan("");
  return teacher ? a.final_teacher_test_acc : a.final_student_test_acc;
}

std::string csv_num(double v) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

void DatasetSpec::validate() const {
  if (num_classes < 2) throw UsageError("data.num_classes must be >= 2");
  if (resolution < 1) throw UsageError("data.resolution must be >= 1");
  if (!(retain_fraction > 0 && retain_fraction <= 1)) {
    throw UsageError("data.retain_fraction must be in (0, 1]");
  }
  if (downsample_to && (*downsample_to < 1 || *downsample_to > resolution)) {
    throw UsageError("data.downsample_to must be in [1, resolution]");
  }
  if (normalization && (normalization->mean.size() != channels ||
                        normalization->stddev.size() != channels)) {
    throw UsageError("data.normalization needs one mean and std per channel");
  }
  switch (source) {
    case DataSource::synthetic:
      if (train_per_class < 1 || test_per_class < 1) {
        throw UsageError("data.train_per_class and data.test_per_class must be >= 1");
      }
      if (!(noise >= 0) || !(max_mix >= 0 && max_mix < 1)) {
        throw UsageError("data.noise must be >= 0 and data.max_mix in [0, 1)");
      }
      break;
    case DataSource::cifar_binary:
      cifar_variant(variant);
      if (train_path.empty() || test_path.empty()) {
        throw UsageError("cifar_binary needs data.train_path and data.test_path");
      }
      if (channels != 3 || resolution != 32) {
        throw UsageError("cifar_binary data is 3x32x32");
      }
      break;
    case DataSource::idx:
      if (train_path.empty() || test_path.empty() || train_labels.empty() ||
          test_labels.empty()) {
        throw UsageError("idx needs data.train_path/test_path and data.train_labels/test_labels");
      }
      break;
  }
}

void ExperimentConfig::validate() const {
  if (schema_version != kSchemaVersion) {
    throw UsageError("schema_version " + std::to_string(schema_version) + " is not supported (expected " +
                     std::to_string(kSchemaVersion) + ")");
  }
  checked_train(train);
  data.validate();
  if (verify_level != "fast" && verify_level != "full") {
    throw UsageError("verify.level must be fast or full");
  }
  try {
    nn::validate(teacher_spec());
    nn::validate(student_spec());
  } catch (const std::exception& e) {
    throw UsageError(std::string("backbone preset: ") + e.what());
  }
}

nn::BackboneSpec ExperimentConfig::teacher_spec() const {
  const std::size_t res = data.downsample_to.value_or(data.resolution);
  try {
    return nn::preset_spec(teacher_preset, res, data.num_classes, data.channels);
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("teacher_preset: ") + e.what());
  }
}

nn::BackboneSpec ExperimentConfig::student_spec() const {
  const std::size_t res = data.downsample_to.value_or(data.resolution);
  try {
    return nn::preset_spec(student_preset, res, data.num_classes, data.channels);
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("student_preset: ") + e.what());
  }
}

ExperimentConfig default_experiment() {
  ExperimentConfig c;
  c.train = presets::desk_train_config();
  const auto synth = presets::desk_synthetic();
  c.data.noise = synth.noise;
  c.data.max_mix = synth.max_mix;
  c.data.augmentation = presets::desk_augmentation();
  return c;
}

std::string to_json(const ExperimentConfig& c) {
  const auto& t = c.train;
  const auto& d = c.data;
  json j;
  j["schema_version"] = c.schema_version;
  j["run_dir"] = c.run_dir.string();
  j["teacher_preset"] = c.teacher_preset;
  j["student_preset"] = c.student_preset;
  j["teacher_checkpoint"] = c.teacher_checkpoint;
  j["train"] = {
      {"batch_size", t.batch_size},
      {"data_workers", t.data_workers},
      {"lr_initial", t.lr_initial},
      {"lr_decay_epochs", t.lr_decay_epochs},
      {"lr_decay_factor", t.lr_decay_factor},
      {"momentum", t.momentum},
      {"weight_decay", t.weight_decay},
      {"temperature", t.temperature},
      {"seed", t.seed},
      {"total_epochs", t.total_epochs},
      {"teacher_mode", train::to_string(t.teacher_mode)},
      {"guided_teacher", t.guided_teacher},
      {"guided_student", t.guided_student},
      {"guided_pairs", optional_json(t.guided_pairs)},
      {"within_stream", t.within_stream},
      {"within_stream_mode", within_name(t.within_stream_mode)},
      {"t2_scaling", t.t2_scaling},
      {"loss_weights",
       {{"distill", t.loss_weights.distill},
        {"feature", t.loss_weights.feature},
        {"guided_kl", t.loss_weights.guided_kl},
        {"guided_feature", t.loss_weights.guided_feature},
        {"classification", t.loss_weights.classification}}},
      {"desync", t.desync},
      {"student_init_seed", optional_json(t.student_init_seed)},
  };
  json norm = nullptr;
  if (d.normalization) norm = {{"mean", d.normalization->mean}, {"std", d.normalization->stddev}};
  j["data"] = {
      {"source", source_name(d.source)},
      {"num_classes", d.num_classes},
      {"resolution", d.resolution},
      {"channels", d.channels},
      {"train_per_class", d.train_per_class},
      {"test_per_class", d.test_per_class},
      {"synth_seed", d.synth_seed},
      {"noise", d.noise},
      {"max_mix", d.max_mix},
      {"variant", d.variant},
      {"train_path", d.train_path},
      {"test_path", d.test_path},
      {"train_labels", d.train_labels},
      {"test_labels", d.test_labels},
      {"retain_fraction", d.retain_fraction},
      {"subset_seed", d.subset_seed},
      {"downsample_to", optional_json(d.downsample_to)},
      {"normalization", norm},
      {"augmentation",
       {{"enabled", d.augmentation.enabled},
        {"crop_padding", d.augmentation.crop_padding},
        {"horizontal_flip", d.augmentation.horizontal_flip}}},
  };
  j["verify"] = {{"level", c.verify_level}};
  j["ablation"] = {{"pair_sweep", c.ablation_pair_sweep}};
  j["dump_embeddings"] = c.dump_embeddings;
  return j.dump(2) + "\n";
}

ExperimentConfig experiment_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw UsageError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c = default_experiment();
  {
    Reader r(j, "");
    c.schema_version = -1;
    r.get("schema_version", c.schema_version);
    if (c.schema_version == -1) throw UsageError("config: missing schema_version");
    if (c.schema_version != kSchemaVersion) {
      throw UsageError("config: schema_version " + std::to_string(c.schema_version) +
                       " is not supported (expected " + std::to_string(kSchemaVersion) + ")");
    }
    std::string run_dir = c.run_dir.string();
    r.get("run_dir", run_dir);
    c.run_dir = run_dir;
    r.get("teacher_preset", c.teacher_preset);
    r.get("student_preset", c.student_preset);
    r.get("teacher_checkpoint", c.teacher_checkpoint);
    if (const json* t = r.object("train")) read_train(*t, c.train);
    if (const json* d = r.object("data")) read_data(*d, c.data);
    if (const json* v = r.object("verify")) {
      Reader vr(*v, "verify.");
      vr.get("level", c.verify_level);
    }
    if (const json* a = r.object("ablation")) {
      Reader ar(*a, "ablation.");
      ar.get("pair_sweep", c.ablation_pair_sweep);
    }
    r.get("dump_embeddings", c.dump_embeddings);
  }
  return c;
}

ExperimentConfig load_experiment(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read config '" + path.string() + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return experiment_from_json(ss.str());
}

Datasets build_datasets(const DatasetSpec& spec) {
  spec.validate();
  Datasets out;
  switch (spec.source) {
    case DataSource::synthetic: {
      data::SyntheticOptions o;
      o.channels = spec.channels;
      o.noise = spec.noise;
      o.max_mix = spec.max_mix;
      o.sample_stream = 0;
      out.train = data::synth_generate(spec.num_classes, spec.train_per_class, spec.resolution,
                                       spec.synth_seed, o);
      o.sample_stream = 1;
      out.test = data::synth_generate(spec.num_classes, spec.test_per_class, spec.resolution,
                                      spec.synth_seed, o);
      break;
    }
    case DataSource::cifar_binary: {
      const auto v = cifar_variant(spec.variant);
      out.train = data::load_cifar_binary(spec.train_path, v, spec.num_classes);
      out.test = data::load_cifar_binary(spec.test_path, v, spec.num_classes);
      break;
    }
    case DataSource::idx:
      out.train = data::load_idx(spec.train_path, spec.train_labels, spec.num_classes);
      out.test = data::load_idx(spec.test_path, spec.test_labels, spec.num_classes);
      break;
  }
  if (out.train.channels != spec.channels || out.train.resolution != spec.resolution) {
    throw UsageError("data: files hold " + std::to_string(out.train.channels) + "x" +
                     std::to_string(out.train.resolution) + " images, config says " +
                     std::to_string(spec.channels) + "x" + std::to_string(spec.resolution));
  }
  if (spec.retain_fraction < 1.0) {
    out.train = data::subset_few_sample(out.train, spec.retain_fraction, spec.subset_seed);
  }
  if (spec.downsample_to && *spec.downsample_to != spec.resolution) {
    out.train = data::downsample(out.train, *spec.downsample_to);
    out.test = data::downsample(out.test, *spec.downsample_to);
  }
  out.norm = spec.normalization ? *spec.normalization : data::compute_normalization(out.train);
  return out;
}

const std::vector<AblationRow>& ablation_grid() {
  using train::TeacherMode;
  static const std::vector<AblationRow> rows{
      {"KD", TeacherMode::fixed, false, false},
      {"KD+ET", TeacherMode::evolutionary, false, false},
      {"KD+S_G", TeacherMode::fixed, false, true},
      {"KD+S_G+ET", TeacherMode::evolutionary, false, true},
      {"KD+T_G+S_G", TeacherMode::fixed, true, true},
      {"EKD", TeacherMode::evolutionary, true, true},
  };
  return rows;
}

TrainOutcome cmd_pretrain(const ExperimentConfig& config, std::ostream& log) {
  config.validate();
  // The teacher preset alone, on the classification loss of each of its heads.
  train::TrainConfig t = config.train;
  t.teacher_mode = train::TeacherMode::none;
  t.guided_student = t.guided_teacher;
  t.within_stream = false;
  t.student_init_seed = t.teacher_init_seed();
  const auto spec = config.teacher_spec();
  auto state = train::TrainState::create(spec, spec, t);
  const auto ds = build_datasets(config.data);

  fs::create_directories(config.run_dir);
  write_text(config.run_dir / "config.snapshot.json", to_json(config));
  TrainOutcome out;
  out.run_dir = config.run_dir;
  out.artifacts = train::train(state, ds.train, ds.test, ds.norm, config.data.augmentation, t,
                               logged(run_options(config, config.run_dir), log, "pretrain"));
  const fs::path ckpt = config.run_dir / "pretrained.ekd";
  io::write_checkpoint(ckpt, io::make_checkpoint(state.student.named_tensors()));
  out.artifacts.checkpoints.push_back(ckpt);
  log << "pretrained " << config.teacher_preset << " -> " << ckpt.string() << "\n";
  return out;
}

namespace {

void dump_embeddings(nn::Backbone<float>& bb, const data::Dataset& test,
                     const data::Normalization& norm, const fs::path& path) {
  ad::NoGradScope no_grad;
  const data::Augmentation none{false, 0, false};
  std::vector<float> values;
  std::size_t dim = 0;
  for (const auto& idx : data::sequential_batches(test.size(), 256)) {
    auto b = data::make_batch(test, idx, norm, none, 0, 0);
    auto f = bb.forward(b.images, nn::ForwardMode::eval()).feature;
    dim = f.dim(1);
    const auto d = f.data();
    values.insert(values.end(), d.begin(), d.end());
  }
  write_embeddings(path, test.size(), dim, values);
}

TrainOutcome run_training(const ExperimentConfig& config, const Datasets& ds,
                          const fs::path& dir, std::ostream& log, const std::string& label) {
  auto state = train::TrainState::create(config.teacher_spec(), config.student_spec(), config.train);
  if (config.train.teacher_mode == train::TeacherMode::fixed) load_fixed_teacher(state, config);
  fs::create_directories(dir);
  write_text(dir / "config.snapshot.json", to_json(config));
  TrainOutcome out;
  out.run_dir = dir;
  out.artifacts = train::train(state, ds.train, ds.test, ds.norm, config.data.augmentation,
                               config.train, logged(run_options(config, dir), log, label));
  if (config.dump_embeddings) {
    dump_embeddings(state.student.backbone(), ds.test, ds.norm, dir / "embeddings.bin");
  }
  return out;
}

}  // namespace

TrainOutcome cmd_train(const ExperimentConfig& config, std::ostream& log) {
  config.validate();
  if (config.train.teacher_mode == train::TeacherMode::fixed && config.teacher_checkpoint.empty()) {
    throw UsageError("teacher_mode=fixed requires teacher_checkpoint (see the pretrain command)");
  }
  const auto ds = build_datasets(config.data);
  return run_training(config, ds, config.run_dir, log, "train");
}

std::vector<AblationResult> cmd_ablate(const ExperimentConfig& base, std::ostream& log) {
  base.validate();
  const auto ds = build_datasets(base.data);
  fs::create_directories(base.run_dir);
  write_text(base.run_dir / "config.snapshot.json", to_json(base));

  ExperimentConfig paired = base;
  // Every row starts from the same student weights.
  paired.train.student_init_seed = base.train.effective_student_init_seed();

  // Fixed rows need a pretrained teacher; train one (with guided heads, so that
  // the KD+T_G+S_G row can use them) unless the config supplies it.
  std::string teacher_ckpt = base.teacher_checkpoint;
  std::string pretrain_error;
  if (teacher_ckpt.empty()) {
    ExperimentConfig pre = paired;
    pre.train.guided_teacher = true;
    pre.run_dir = base.run_dir / "pretrain";
    try {
      cmd_pretrain(pre, log);
      teacher_ckpt = (pre.run_dir / "pretrained.ekd").string();
    } catch (const std::exception& e) {
      pretrain_error = std::string("teacher pretraining failed: ") + e.what();
      log << pretrain_error << "\n";
    }
  }

  struct Job {
    std::string name;
    train::TeacherMode mode;
    bool gt, gs;
    std::optional<std::size_t> pairs;
  };
  std::vector<Job> jobs;
  for (const auto& row : ablation_grid()) {
    jobs.push_back({row.name, row.teacher_mode, row.guided_teacher, row.guided_student,
                    base.train.guided_pairs});
  }
  if (base.ablation_pair_sweep) {
    const std::size_t c = base.student_spec().blocks.size();
    for (std::size_t p = 0; p < c; ++p) {
      jobs.push_back({"EKD@pairs=" + std::to_string(p), train::TeacherMode::evolutionary, p > 0,
                      p > 0, p});
    }
  }

  std::vector<AblationResult> results;
  for (const auto& job : jobs) {
    AblationResult r;
    r.row = job.name;
    r.teacher_mode = job.mode;
    r.guided_teacher = job.gt;
    r.guided_student = job.gs;
    ExperimentConfig c = paired;
    c.train.teacher_mode = job.mode;
    c.train.guided_teacher = job.gt;
    c.train.guided_student = job.gs;
    c.train.guided_pairs = job.pairs;
    c.teacher_checkpoint = job.mode == train::TeacherMode::fixed ? teacher_ckpt : "";
    const std::size_t max_pairs = c.student_spec().blocks.size() - 1;
    r.guided_pairs = job.gs ? job.pairs.value_or(max_pairs) : 0;
    log << "== " << job.name << "\n";
    try {
      if (job.mode == train::TeacherMode::fixed && teacher_ckpt.empty()) {
        throw std::runtime_error(pretrain_error);
      }
      std::string dirname = job.name;
      for (char& ch : dirname) {
        if (ch == '+' || ch == '@' || ch == '=') ch = '_';
      }
      auto out = run_training(c, ds, base.run_dir / dirname, log, job.name);
      r.ok = true;
      r.student_test_acc = final_or_nan(out.artifacts, false);
      r.teacher_test_acc = final_or_nan(out.artifacts, true);
    } catch (const std::exception& e) {
      r.error = e.what();
      r.student_test_acc = r.teacher_test_acc = std::nan("");
      log << "row " << job.name << " failed: " << e.what() << "\n";
    }
    results.push_back(r);
  }

  std::ofstream csv(base.run_dir / "ablation.csv", std::ios::binary | std::ios::trunc);
  csv << "row,teacher_mode,guided_teacher,guided_student,guided_pairs,status,student_test_acc,"
         "teacher_test_acc,error\n";
  for (const auto& r : results) {
    std::string err = r.error;
    for (char& ch : err) {
      if (ch == ',' || ch == '\n' || ch == '"') ch = ' ';
    }
    csv << r.row << "," << train::to_string(r.teacher_mode) << "," << r.guided_teacher << ","
        << r.guided_student << "," << r.guided_pairs << "," << (r.ok ? "ok" : "failed") << ","
        << csv_num(r.student_test_acc) << "," << csv_num(r.teacher_test_acc) << "," << err
        << "\n";
  }
  if (!csv) throw std::runtime_error("cannot write ablation.csv");
  return results;
}

EvalResult cmd_eval(const ExperimentConfig& config, const fs::path& checkpoint,
                    std::ostream& out, const fs::path& embeddings) {
  config.validate();
  if (!fs::exists(checkpoint)) throw UsageError("checkpoint '" + checkpoint.string() + "' not found");
  const auto ckpt = io::read_checkpoint(checkpoint);
  auto backbone = nn::Backbone<float>::build(config.student_spec(), 0);
  auto tensors = backbone.named_tensors();
  for (auto& t : tensors) t.name = "backbone." + t.name;
  try {
    io::load_into(ckpt, tensors, true);
  } catch (const io::CheckpointError& e) {
    throw io::CheckpointError("checkpoint '" + checkpoint.string() + "' does not fit the " +
                              config.student_preset + " backbone: " + e.what());
  }
  const auto ds = build_datasets(config.data);
  if (ds.test.size() == 0) throw std::invalid_argument("eval: empty test set");
  EvalResult r;
  r.samples = ds.test.size();
  r.accuracy = train::evaluate(backbone, ds.test, ds.norm);
  if (!embeddings.empty()) dump_embeddings(backbone, ds.test, ds.norm, embeddings);
  char buf[80];
  std::snprintf(buf, sizeof buf, "accuracy %.4f samples %zu\n", r.accuracy, r.samples);
  out << buf;
  return r;
}

void cmd_export(const fs::path& checkpoint, const fs::path& out) {
  if (!fs::exists(checkpoint)) throw UsageError("checkpoint '" + checkpoint.string() + "' not found");
  const auto ckpt = io::read_checkpoint(checkpoint);
  io::Checkpoint exported;
  exported.version = ckpt.version;
  for (const auto& e : ckpt.entries) {
    if (e.name.rfind("backbone.", 0) == 0) exported.entries.push_back(e);
  }
  if (exported.entries.empty()) {
    throw io::CheckpointError("'" + checkpoint.string() + "' holds no backbone tensors");
  }
  io::write_checkpoint(out, exported);
}

void write_embeddings(const fs::path& path, std::size_t count, std::size_t dim,
                      const std::vector<float>& values) {
  if (values.size() != count * dim) throw std::invalid_argument("embeddings: size mismatch");
  std::vector<std::uint8_t> bytes;
  bytes.reserve(16 + values.size() * 4);
  auto put = [&](std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  };
  put(count, 8);
  put(dim, 8);
  for (float f : values) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    put(u, 4);
  }
  std::ofstream o(path, std::ios::binary | std::ios::trunc);
  o.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!o) throw std::runtime_error("cannot write '" + path.string() + "'");
}

}  // namespace ekd::cli
