// capsattack: train capsule networks and CNN baselines, generate adversarial
// examples against them, evaluate reconstruction-based detection, and run the
// analysis protocols (vote histograms, norms, transfer, affine, timing).
//
// Exit codes: 0 success, 1 runtime error, 2 usage error.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <mutex>
#include <thread>
#include <vector>

#include "caps/caps.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace caps;

namespace {

constexpr const char* kVersion = "capsattack 0.1.0";

struct CommonOpts {
  std::string dataset = "synthetic";
  std::string out;
  std::string config_path;
  std::uint64_t seed = 0;
  bool force = false;
  int jobs = 1;
};

struct DataOpts {
  int classes = 4;
  std::int64_t train_per_class = 150;
  std::int64_t val_per_class = 50;
  std::int64_t test_per_class = 50;
  std::int64_t size = 16;
  std::int64_t jitter = 4;
  double noise = 0.05;
};

struct Splits {
  Dataset<float> train, val, test;
};

json load_config(const std::string& path) {
  if (path.empty()) return json::object();
  std::ifstream f(path);
  if (!f) throw Error("cannot open config file " + path);
  json j;
  f >> j;
  return j;
}

// Pulls a value from a config section unless the flag was set on the
// command line (flags override config which overrides defaults).
template <typename T>
void merge(const CLI::App& app, const std::string& flag, const json& section,
           const std::string& key, T& value) {
  if (app.count(flag) > 0) return;
  if (section.contains(key)) value = section.at(key).get<T>();
}

DataOpts data_opts_from(const json& cfg) {
  DataOpts d;
  if (!cfg.contains("data")) return d;
  const json& j = cfg.at("data");
  d.classes = j.value("classes", d.classes);
  d.train_per_class = j.value("train_per_class", d.train_per_class);
  d.val_per_class = j.value("val_per_class", d.val_per_class);
  d.test_per_class = j.value("test_per_class", d.test_per_class);
  d.size = j.value("size", d.size);
  d.jitter = j.value("jitter", d.jitter);
  d.noise = j.value("noise", d.noise);
  return d;
}

Splits load_splits(const CommonOpts& common, const DataOpts& d) {
  Splits s;
  if (common.dataset == "synthetic") {
    s.train = synthetic_dataset<float>(d.classes, d.train_per_class, d.size,
                                       mix_seed(common.seed, 1), d.jitter, d.noise);
    s.val = synthetic_dataset<float>(d.classes, d.val_per_class, d.size,
                                     mix_seed(common.seed, 2), d.jitter, d.noise);
    s.test = synthetic_dataset<float>(d.classes, d.test_per_class, d.size,
                                      mix_seed(common.seed, 3), d.jitter, d.noise);
    s.train.split = "train";
    s.val.split = "val";
    s.test.split = "test";
    return s;
  }
  const fs::path dir(common.dataset);
  auto full = load_idx<float>((dir / "train-images-idx3-ubyte").string(),
                              (dir / "train-labels-idx1-ubyte").string());
  // last tenth of the training file serves as the validation split
  const std::int64_t val_n = std::max<std::int64_t>(1, full.size() / 10);
  s.train = full.take(0, full.size() - val_n);
  s.train.split = "train";
  s.val = full.take(full.size() - val_n, val_n);
  s.val.split = "val";
  s.test = load_idx<float>((dir / "t10k-images-idx3-ubyte").string(),
                           (dir / "t10k-labels-idx1-ubyte").string());
  s.test.split = "test";
  return s;
}

const Dataset<float>& pick_split(const Splits& s, const std::string& name) {
  if (name == "train") return s.train;
  if (name == "val") return s.val;
  if (name == "test") return s.test;
  throw Error("unknown split " + name);
}

CapsNetConfig model_config_from(const json& cfg, const DataOpts& d) {
  CapsNetConfig m;
  m.in_channels = 1;
  m.in_h = d.size;
  m.in_w = d.size;
  m.backbone = {{16, 5, 1, Activation::relu}, {16, 3, 2, Activation::relu}};
  m.num_classes = d.classes;
  m.out_dim = 8;
  m.routing_iters = 3;
  m.recon_hidden = {64, 128};
  if (cfg.contains("model")) {
    const json& j = cfg.at("model");
    const std::string kind = j.value("kind", "capsnet");
    m.kind = kind == "capsnet" ? ModelKind::capsnet
             : kind == "cnn_cr" ? ModelKind::cnn_cr
             : kind == "cnn_r" ? ModelKind::cnn_r
                               : throw ConfigError("unknown model kind " + kind);
    if (j.contains("backbone")) {
      m.backbone.clear();
      for (const auto& l : j.at("backbone")) {
        ConvSpec spec;
        spec.channels = l.at("channels").get<std::int64_t>();
        spec.kernel = l.at("kernel").get<std::int64_t>();
        spec.stride = l.value("stride", 1);
        const std::string act = l.value("activation", "relu");
        spec.act = act == "relu" ? Activation::relu
                   : act == "sigmoid" ? Activation::sigmoid
                                      : Activation::linear;
        m.backbone.push_back(spec);
      }
    }
    m.out_dim = j.value("out_dim", m.out_dim);
    m.routing_iters = j.value("routing_iters", m.routing_iters);
    m.primary_dim = j.value("primary_dim", std::int64_t(0));
    if (j.contains("recon_hidden"))
      m.recon_hidden = j.at("recon_hidden").get<std::vector<std::int64_t>>();
  }
  if (m.kind == ModelKind::capsnet) {
    if (m.primary_dim == 0) m.primary_dim = 8;
    const auto o = m.backbone_out();
    m.num_primary = (o[0] / m.primary_dim) * o[1] * o[2];
  }
  m.validate();
  return m;
}

void prepare_out_dir(const CommonOpts& common) {
  if (common.out.empty()) throw Error("--out is required");
  const fs::path dir(common.out);
  if (fs::exists(dir) && !fs::is_empty(dir) && !common.force)
    throw Error("output directory " + common.out +
                " exists; pass --force to overwrite");
  fs::create_directories(dir);
}

std::string iso_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

void write_manifest(const CommonOpts& common, const std::string& command,
                    const std::vector<std::string>& argv, const json& settings,
                    const std::vector<std::string>& outputs) {
  json m;
  m["command"] = command;
  m["argv"] = argv;
  m["seed"] = common.seed;
  m["version"] = kVersion;
  m["settings"] = settings;
  m["outputs"] = outputs;
  m["timestamp"] = iso_timestamp();
  std::ofstream f(fs::path(common.out) / "manifest.json");
  f << m.dump(2) << "\n";
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  f << j.dump(2) << "\n";
}

AttackFamily parse_family(const std::string& s) {
  if (s == "fgsm") return AttackFamily::fgsm;
  if (s == "bim") return AttackFamily::bim;
  if (s == "pgd") return AttackFamily::pgd;
  if (s == "mim") return AttackFamily::mim;
  throw ConfigError("unknown attack family " + s);
}

TargetHead parse_target(const std::string& s) {
  if (s == "logits") return TargetHead::cnn_logits;
  if (s == "caps") return TargetHead::caps;
  if (s == "votes") return TargetHead::votes;
  if (s == "votes-v1") return TargetHead::votes_variant1;
  if (s == "votes-v2") return TargetHead::votes_variant2;
  throw ConfigError("unknown attack target " + s);
}

struct AttackFlags {
  std::string family = "pgd";
  std::string target = "caps";
  double eps = 0.0;
  double alpha = -1.0;
  std::int64_t iters = -1;
  int targeted = -1;
  bool detection_aware = false;
  double beta = 0.5;
  double mim_decay = 1.0;
  bool no_random_start = false;
  bool stage2_ascend = false;
  bool stages_sequential = false;
  bool stage2_clean_ref = false;
};

void add_attack_flags(CLI::App* cmd, AttackFlags& a) {
  cmd->add_option("--attack", a.family, "fgsm|bim|pgd|mim");
  cmd->add_option("--target", a.target, "logits|caps|votes|votes-v1|votes-v2");
  cmd->add_option("--eps", a.eps, "l_inf budget in pixel units");
  cmd->add_option("--alpha", a.alpha, "step size (defaults per family)");
  cmd->add_option("--iters", a.iters, "iterations (defaults per family)");
  cmd->add_option("--targeted", a.targeted, "target class for targeted mode");
  cmd->add_flag("--detection-aware", a.detection_aware,
                "two-stage detection-aware attack");
  cmd->add_option("--beta", a.beta, "two-stage balance in [0,1]");
  cmd->add_option("--mim-decay", a.mim_decay, "momentum decay (mim)");
  cmd->add_flag("--no-random-start", a.no_random_start, "disable PGD random start");
  cmd->add_flag("--stage2-ascend", a.stage2_ascend,
                "ascend the reconstruction error in stage 2");
  cmd->add_flag("--stages-sequential", a.stages_sequential,
                "run all stage-1 iterations before stage 2");
  cmd->add_flag("--stage2-clean-ref", a.stage2_clean_ref,
                "measure stage-2 distance against the clean image");
}

AttackConfig resolve_attack(const CLI::App& cmd, const AttackFlags& a,
                            const json& cfg, std::uint64_t seed) {
  AttackFlags f = a;
  const json section = cfg.contains("attack") ? cfg.at("attack") : json::object();
  merge(cmd, "--attack", section, "family", f.family);
  merge(cmd, "--target", section, "target", f.target);
  merge(cmd, "--eps", section, "eps", f.eps);
  merge(cmd, "--alpha", section, "alpha", f.alpha);
  merge(cmd, "--iters", section, "iters", f.iters);
  merge(cmd, "--beta", section, "beta", f.beta);
  merge(cmd, "--mim-decay", section, "mim_decay", f.mim_decay);

  AttackConfig c;
  c.family = parse_family(f.family);
  c.target_head = parse_target(f.target);
  c.epsilon = f.eps;
  c.beta = f.beta;
  c.momentum_decay = f.mim_decay;
  c.seed = seed;
  c.stage2_descend = !f.stage2_ascend;
  c.stages_sequential = f.stages_sequential;
  c.stage2_clean_ref = f.stage2_clean_ref;
  if (f.targeted >= 0) c.targeted = f.targeted;
  if (c.family == AttackFamily::fgsm) {
    c.iterations = 1;
    c.alpha = c.epsilon;
    if (f.iters > 1) throw ConfigError("fgsm uses exactly one iteration");
    if (f.alpha >= 0 && f.alpha != c.epsilon)
      throw ConfigError("fgsm requires alpha == eps");
  } else {
    // conventional fallbacks when neither flag nor config supplies a value:
    // PGD runs 50 iterations at eps/20, BIM and MIM 10 iterations at eps/10
    const bool pgd = c.family == AttackFamily::pgd;
    c.iterations = f.iters >= 0 ? f.iters : (pgd ? 50 : 10);
    c.alpha = f.alpha >= 0 ? f.alpha : c.epsilon / (pgd ? 20.0 : 10.0);
    c.random_start = pgd && !f.no_random_start;
  }
  c.validate();
  return c;
}

json attack_settings_json(const AttackConfig& c) {
  json j;
  j["family"] = c.family == AttackFamily::fgsm ? "fgsm"
                : c.family == AttackFamily::bim ? "bim"
                : c.family == AttackFamily::pgd ? "pgd"
                                                : "mim";
  j["target"] = c.target_head == TargetHead::cnn_logits ? "logits"
                : c.target_head == TargetHead::caps ? "caps"
                : c.target_head == TargetHead::votes ? "votes"
                : c.target_head == TargetHead::votes_variant1 ? "votes-v1"
                                                              : "votes-v2";
  j["eps"] = c.epsilon;
  j["alpha"] = c.alpha;
  j["iters"] = c.iterations;
  j["random_start"] = c.random_start;
  j["momentum_decay"] = c.momentum_decay;
  if (c.targeted) j["targeted"] = *c.targeted;
  j["beta"] = c.beta;
  j["stage2_descend"] = c.stage2_descend;
  j["stages_sequential"] = c.stages_sequential;
  j["stage2_clean_ref"] = c.stage2_clean_ref;
  return j;
}

// Attack every example of a split, data-parallel over examples. Results are
// written by example index, so the output is identical for any job count.
std::vector<AttackOutcome<float>> run_attacks(
    const Model<float>& model, const Dataset<float>& ds, const AttackConfig& base,
    bool detection_aware, const DetectionThreshold& theta, int jobs,
    const std::vector<std::int64_t>& indices) {
  std::vector<AttackOutcome<float>> results(indices.size());
  std::exception_ptr failure;
  std::mutex failure_mutex;
  const auto worker = [&](std::size_t from, std::size_t to) {
    try {
      for (std::size_t k = from; k < to; ++k) {
        const std::int64_t i = indices[k];
        AttackConfig c = base;
        c.seed = base.seed ^ static_cast<std::uint64_t>(i);
        const Tensor<float> x = ds.image(i);
        const int label = ds.labels[static_cast<std::size_t>(i)];
        results[k] = detection_aware
                         ? detection_aware_attack(model, x, label, c, theta)
                         : gradient_attack(model, x, label, c);
        if (!detection_aware) {
          Shape b = results[k].adversarial.shape();
          b.insert(b.begin(), 1);
          const auto v = detect(model, results[k].adversarial.reshaped(b), theta);
          results[k].flagged = v[0].flagged;
          results[k].recon_error = v[0].error;
        }
      }
    } catch (...) {
      std::lock_guard<std::mutex> lock(failure_mutex);
      if (!failure) failure = std::current_exception();
    }
  };
  if (jobs <= 1) {
    worker(0, results.size());
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (results.size() + jobs - 1) / jobs;
    for (int t = 0; t < jobs; ++t) {
      const std::size_t from = t * chunk;
      const std::size_t to = std::min(results.size(), from + chunk);
      if (from >= to) break;
      pool.emplace_back(worker, from, to);
    }
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  return results;
}

int cmd_train(const CommonOpts& common, const json& cfg,
              const std::vector<std::string>& argv, const CLI::App& cmd,
              TrainConfig tc, const std::string& at_mode,
              const std::string& loss_kind) {
  prepare_out_dir(common);
  const DataOpts dopts = data_opts_from(cfg);
  const Splits splits = load_splits(common, dopts);
  CapsNetConfig mc = model_config_from(cfg, dopts);

  const json section = cfg.contains("train") ? cfg.at("train") : json::object();
  merge(cmd, "--epochs", section, "epochs", tc.epochs);
  merge(cmd, "--batch", section, "batch_size", tc.batch_size);
  merge(cmd, "--lr", section, "lr", tc.lr);
  merge(cmd, "--lr-decayed", section, "lr_decayed", tc.lr_decayed);
  merge(cmd, "--decay-epoch", section, "decay_epoch", tc.decay_epoch);
  merge(cmd, "--recon-weight", section, "recon_weight", tc.recon_weight);
  merge(cmd, "--at-iters", section, "at_iterations", tc.at_iterations);
  merge(cmd, "--at-eps", section, "at_epsilon", tc.at_epsilon);
  merge(cmd, "--at-alpha", section, "at_alpha", tc.at_alpha);
  merge(cmd, "--at-warmup", section, "at_warmup_epochs", tc.at_warmup_epochs);
  std::string at = at_mode, loss = loss_kind;
  merge(cmd, "--at", section, "at_mode", at);
  merge(cmd, "--loss", section, "loss", loss);

  tc.seed = common.seed;
  tc.at_mode = at == "none" ? ATMode::none
               : at == "caps" ? ATMode::caps
               : at == "caps+votes" ? ATMode::caps_plus_votes
               : at == "votes-only" ? ATMode::votes_only
                                    : throw Error("unknown at mode " + at);
  tc.loss = loss == "margin" ? LossKind::margin
            : loss == "ce" ? LossKind::ce_log_lengths
                           : throw Error("unknown loss " + loss);

  Model<float> model = init_model<float>(mc, mix_seed(common.seed, 4));
  const auto metrics = train(model, splits.train, splits.test, tc);

  const fs::path out(common.out);
  save_checkpoint_file(model, (out / "model.caps").string());
  std::ofstream mf(out / "metrics.jsonl");
  for (const auto& m : metrics) {
    json j;
    j["epoch"] = m.epoch;
    j["train_loss"] = m.train_loss;
    j["test_acc"] = m.test_acc;
    mf << j.dump() << "\n";
  }

  json settings;
  settings["epochs"] = tc.epochs;
  settings["batch_size"] = tc.batch_size;
  settings["lr"] = tc.lr;
  settings["lr_decayed"] = tc.lr_decayed;
  settings["decay_epoch"] = tc.decay_epoch;
  settings["momentum"] = tc.momentum;
  settings["loss"] = loss;
  settings["recon_weight"] = tc.recon_weight;
  settings["at_mode"] = at;
  settings["at_iterations"] = tc.at_iterations;
  settings["at_epsilon"] = tc.at_epsilon;
  settings["at_alpha"] = tc.at_alpha;
  settings["at_warmup_epochs"] = tc.at_warmup_epochs;
  settings["dataset"] = common.dataset;
  settings["model_descriptor"] = ckpt::describe(mc);
  write_manifest(common, "train", argv, settings,
                 {"model.caps", "metrics.jsonl"});
  if (!metrics.empty())
    std::cout << "final test accuracy " << metrics.back().test_acc << "\n";
  return 0;
}

int cmd_attack(const CommonOpts& common, const json& cfg,
               const std::vector<std::string>& argv, const CLI::App& cmd,
               const AttackFlags& aflags, const std::string& model_path,
               const std::string& split, std::int64_t limit) {
  prepare_out_dir(common);
  const DataOpts dopts = data_opts_from(cfg);
  const Splits splits = load_splits(common, dopts);
  const Dataset<float>& ds = pick_split(splits, split);
  Model<float> model = load_checkpoint_file<float>(model_path);
  const AttackConfig base = resolve_attack(cmd, aflags, cfg, common.seed);

  // Reconstruction threshold from the benign validation split.
  const DetectionThreshold theta =
      calibrate_threshold(reconstruction_errors(model, splits.val.images));

  std::vector<std::int64_t> indices;
  std::int64_t skipped = 0;
  for (std::int64_t i = 0; i < ds.size(); ++i) {
    if (base.targeted && ds.labels[static_cast<std::size_t>(i)] == *base.targeted) {
      ++skipped;
      continue;  // targeted attacks skip examples already of the target class
    }
    indices.push_back(i);
    if (limit > 0 && static_cast<std::int64_t>(indices.size()) >= limit) break;
  }
  if (indices.empty())
    throw ConfigError("no examples to attack (all conflict with --targeted)");

  const auto results = run_attacks(model, ds, base, aflags.detection_aware,
                                   theta, common.jobs, indices);

  const fs::path out(common.out);
  json records = json::array();
  const Shape& is = ds.images.shape();
  Tensor<float> adv({static_cast<std::int64_t>(results.size()), is[1], is[2], is[3]});
  Tensor<float> delta(adv.shape());
  const std::int64_t per = is[1] * is[2] * is[3];
  for (std::size_t k = 0; k < results.size(); ++k) {
    const auto& r = results[k];
    json rec;
    rec["index"] = indices[k];
    rec["label"] = ds.labels[static_cast<std::size_t>(indices[k])];
    rec["prediction"] = r.final_prediction;
    rec["success"] = r.success;
    rec["flagged"] = r.flagged;
    rec["recon_error"] = r.recon_error;
    rec["loss_trace"] = r.loss_trace;
    records.push_back(rec);
    for (std::int64_t p = 0; p < per; ++p) {
      adv[static_cast<std::int64_t>(k) * per + p] = r.adversarial[p];
      delta[static_cast<std::int64_t>(k) * per + p] = r.delta[p];
    }
  }
  json results_json;
  results_json["records"] = records;
  results_json["skipped_conflicting"] = skipped;
  write_json(out / "results.json", results_json);

  const RateReport rates = success_and_undetected_rates(results);
  json rj;
  rj["S"] = rates.success_rate;
  rj["R"] = rates.undetected_rate;
  rj["K"] = rates.samples;
  rj["theta"] = theta.theta;
  write_json(out / "rates.json", rj);

  save_tensors_file<float>({{"adv", adv}, {"delta", delta}},
                           (out / "adv.bin").string());

  json settings = attack_settings_json(base);
  settings["detection_aware"] = aflags.detection_aware;
  settings["model"] = model_path;
  settings["split"] = split;
  settings["jobs"] = common.jobs;
  settings["theta"] = theta.theta;
  write_manifest(common, "attack", argv, settings,
                 {"results.json", "rates.json", "adv.bin"});
  std::cout << "S=" << rates.success_rate << " R=" << rates.undetected_rate
            << " K=" << rates.samples << "\n";
  return 0;
}

int cmd_detect_eval(const CommonOpts& common, const json& cfg,
                    const std::vector<std::string>& argv,
                    const std::string& model_path, double percentile) {
  prepare_out_dir(common);
  const DataOpts dopts = data_opts_from(cfg);
  const Splits splits = load_splits(common, dopts);
  Model<float> model = load_checkpoint_file<float>(model_path);
  const auto val_errors = reconstruction_errors(model, splits.val.images);
  const DetectionThreshold theta = calibrate_threshold(val_errors, percentile);

  const auto flag_rate = [&](const Dataset<float>& ds) {
    const auto verdicts = detect(model, ds.images, theta);
    std::int64_t flagged = 0;
    for (const auto& v : verdicts)
      if (v.flagged) ++flagged;
    return static_cast<double>(flagged) / static_cast<double>(verdicts.size());
  };

  json j;
  j["theta"] = theta.theta;
  j["percentile"] = theta.calibration_percentile;
  j["val_flag_rate"] = flag_rate(splits.val);
  j["test_flag_rate"] = flag_rate(splits.test);
  j["val_n"] = splits.val.size();
  write_json(fs::path(common.out) / "detection.json", j);
  write_manifest(common, "detect-eval", argv,
                 {{"model", model_path}, {"percentile", percentile}},
                 {"detection.json"});
  std::cout << "theta=" << theta.theta << " val_flag_rate=" << j["val_flag_rate"]
            << "\n";
  return 0;
}

struct AdvSet {
  Tensor<float> adv;
  Tensor<float> delta;
  std::vector<int> labels;
  std::vector<bool> success;
};

AdvSet load_adv_dir(const std::string& dir) {
  AdvSet s;
  const auto tensors = load_tensors_file<float>((fs::path(dir) / "adv.bin").string());
  for (const auto& [name, t] : tensors) {
    if (name == "adv") s.adv = t;
    if (name == "delta") s.delta = t;
  }
  if (s.adv.numel() == 0) throw FormatError("adv.bin holds no 'adv' tensor");
  std::ifstream f(fs::path(dir) / "results.json");
  if (!f) throw Error("cannot open results.json in " + dir);
  json j;
  f >> j;
  for (const auto& rec : j.at("records")) {
    s.labels.push_back(rec.at("label").get<int>());
    s.success.push_back(rec.at("success").get<bool>());
  }
  if (static_cast<std::int64_t>(s.labels.size()) != s.adv.shape()[0])
    throw FormatError("results.json and adv.bin disagree on example count");
  return s;
}

int cmd_analyze_votes(const CommonOpts& common, const json& cfg,
                      const std::vector<std::string>& argv,
                      const std::string& model_path, const std::string& adv_dir,
                      const std::string& selector, bool successful_only) {
  prepare_out_dir(common);
  Model<float> model = load_checkpoint_file<float>(model_path);
  const ClassSelector sel = selector == "gt" ? ClassSelector::ground_truth
                            : selector == "lngt"
                                ? ClassSelector::largest_non_gt
                                : throw Error("unknown class selector " + selector);
  Tensor<float> images;
  std::vector<int> labels;
  if (!adv_dir.empty()) {
    AdvSet s = load_adv_dir(adv_dir);
    if (successful_only) {
      std::vector<std::int64_t> keep;
      for (std::size_t i = 0; i < s.success.size(); ++i)
        if (s.success[i]) keep.push_back(static_cast<std::int64_t>(i));
      if (keep.empty()) throw Error("no successful attacks to analyze");
      const Shape& is = s.adv.shape();
      const std::int64_t per = is[1] * is[2] * is[3];
      Tensor<float> subset({static_cast<std::int64_t>(keep.size()), is[1], is[2], is[3]});
      for (std::size_t k = 0; k < keep.size(); ++k) {
        for (std::int64_t p = 0; p < per; ++p)
          subset[static_cast<std::int64_t>(k) * per + p] = s.adv[keep[k] * per + p];
        labels.push_back(s.labels[static_cast<std::size_t>(keep[k])]);
      }
      images = subset;
    } else {
      images = s.adv;
      labels = s.labels;
    }
  } else {
    const DataOpts dopts = data_opts_from(cfg);
    const Splits splits = load_splits(common, dopts);
    images = splits.test.images;
    labels = splits.test.labels;
  }
  const VoteHistogram h = vote_agreement_histogram(model, images, labels, sel);
  std::ofstream f(fs::path(common.out) / "histogram.csv");
  write_histogram_csv(h, f);
  json settings;
  settings["model"] = model_path;
  settings["adv"] = adv_dir;
  settings["class_selector"] = selector;
  settings["successful_only"] = successful_only;
  write_manifest(common, "analyze votes", argv, settings, {"histogram.csv"});
  return 0;
}

int cmd_analyze_norms(const CommonOpts& common,
                      const std::vector<std::string>& argv,
                      const std::string& adv_dir) {
  prepare_out_dir(common);
  AdvSet s = load_adv_dir(adv_dir);
  std::vector<Tensor<float>> deltas;
  const Shape& is = s.delta.shape();
  const std::int64_t per = is[1] * is[2] * is[3];
  for (std::size_t i = 0; i < s.success.size(); ++i) {
    if (!s.success[i]) continue;
    Tensor<float> d({is[1], is[2], is[3]});
    for (std::int64_t p = 0; p < per; ++p)
      d[p] = s.delta[static_cast<std::int64_t>(i) * per + p];
    deltas.push_back(std::move(d));
  }
  const NormReport r = perturbation_norms(deltas);
  json j;
  j["l0"] = r.l0;
  j["l1"] = r.l1;
  j["l2"] = r.l2;
  j["count"] = r.count;
  write_json(fs::path(common.out) / "norms.json", j);
  write_manifest(common, "analyze norms", argv, {{"adv", adv_dir}},
                 {"norms.json"});
  std::cout << "l0=" << r.l0 << " l1=" << r.l1 << " l2=" << r.l2 << "\n";
  return 0;
}

int cmd_analyze_transfer(const CommonOpts& common,
                         const std::vector<std::string>& argv,
                         const std::string& adv_dir,
                         const std::string& target_model_path) {
  prepare_out_dir(common);
  AdvSet s = load_adv_dir(adv_dir);
  Model<float> target = load_checkpoint_file<float>(target_model_path);
  const double tsr = transfer_eval(s.adv, s.labels, s.success, target);
  json j;
  j["tsr"] = tsr;
  std::int64_t successful = 0;
  for (bool b : s.success)
    if (b) ++successful;
  j["source_successful"] = successful;
  write_json(fs::path(common.out) / "transfer.json", j);
  write_manifest(common, "analyze transfer", argv,
                 {{"adv", adv_dir}, {"target_model", target_model_path}},
                 {"transfer.json"});
  std::cout << "tsr=" << tsr << "\n";
  return 0;
}

int cmd_analyze_affine(const CommonOpts& common, const json& cfg,
                       const std::vector<std::string>& argv, const CLI::App& cmd,
                       const AttackFlags& aflags, const std::string& model_path,
                       std::int64_t translate, double rotate, bool with_attack) {
  prepare_out_dir(common);
  const DataOpts dopts = data_opts_from(cfg);
  const Splits splits = load_splits(common, dopts);
  Model<float> model = load_checkpoint_file<float>(model_path);
  std::optional<AttackConfig> attack;
  if (with_attack) attack = resolve_attack(cmd, aflags, cfg, common.seed);
  const EvalReport r = affine_eval(model, splits.test, translate, rotate, attack,
                                   common.seed);
  json j;
  j["translate_px"] = translate;
  j["rotate_deg"] = rotate;
  j["clean_acc"] = r.standard_acc;
  if (r.robust_acc) j["robust_acc"] = *r.robust_acc;
  write_json(fs::path(common.out) / "affine.json", j);
  json settings;
  settings["model"] = model_path;
  settings["translate_px"] = translate;
  settings["rotate_deg"] = rotate;
  if (attack) settings["attack"] = attack_settings_json(*attack);
  write_manifest(common, "analyze affine", argv, settings, {"affine.json"});
  std::cout << "clean=" << r.standard_acc;
  if (r.robust_acc) std::cout << " robust=" << *r.robust_acc;
  std::cout << "\n";
  return 0;
}

int cmd_bench(const CommonOpts& common, const json& cfg,
              const std::vector<std::string>& argv, const CLI::App& cmd,
              const AttackFlags& aflags, const std::string& model_path,
              std::int64_t limit, std::int64_t warmup) {
  prepare_out_dir(common);
  const DataOpts dopts = data_opts_from(cfg);
  const Splits splits = load_splits(common, dopts);
  Model<float> model = load_checkpoint_file<float>(model_path);
  const AttackConfig base = resolve_attack(cmd, aflags, cfg, common.seed);
  Dataset<float> sample = splits.test;
  if (limit > 0 && limit < sample.size()) sample = sample.take(0, limit);
  const TimingReport r = bench_attack_time(model, base, sample, warmup);
  json j = attack_settings_json(base);
  json out_json;
  out_json["attack"] = j["family"];
  out_json["target"] = j["target"];
  out_json["mean_ms"] = r.mean_ms;
  out_json["n"] = r.n;
  out_json["single_inference_ms"] = r.single_inference_ms;
  write_json(fs::path(common.out) / "timing.json", out_json);
  write_manifest(common, "bench", argv, j, {"timing.json"});
  std::cout << "mean_ms=" << r.mean_ms
            << " single_inference_ms=" << r.single_inference_ms << " n=" << r.n
            << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"capsule networks, vote attacks, and reconstruction detection"};
  app.require_subcommand(1);
  std::vector<std::string> raw_argv(argv, argv + argc);

  CommonOpts common;
  const auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--dataset", common.dataset, "synthetic or an IDX directory");
    cmd->add_option("--out", common.out, "output directory")->required();
    cmd->add_option("--seed", common.seed, "run seed");
    cmd->add_option("--config", common.config_path, "JSON config file");
    cmd->add_flag("--force", common.force, "overwrite existing output directory");
    cmd->add_option("--jobs", common.jobs, "data-parallel attack workers");
  };

  // train
  auto* train_cmd = app.add_subcommand("train", "train a model");
  TrainConfig tc;
  std::string at_mode = "none", loss_kind = "margin";
  add_common(train_cmd);
  train_cmd->add_option("--epochs", tc.epochs);
  train_cmd->add_option("--batch", tc.batch_size);
  train_cmd->add_option("--lr", tc.lr);
  train_cmd->add_option("--lr-decayed", tc.lr_decayed);
  train_cmd->add_option("--decay-epoch", tc.decay_epoch);
  train_cmd->add_option("--loss", loss_kind, "margin|ce");
  train_cmd->add_option("--recon-weight", tc.recon_weight);
  train_cmd->add_option("--at", at_mode, "none|caps|caps+votes|votes-only");
  train_cmd->add_option("--at-iters", tc.at_iterations);
  train_cmd->add_option("--at-eps", tc.at_epsilon);
  train_cmd->add_option("--at-alpha", tc.at_alpha);
  train_cmd->add_option("--at-warmup", tc.at_warmup_epochs);

  // attack
  auto* attack_cmd = app.add_subcommand("attack", "generate adversarial examples");
  AttackFlags aflags;
  std::string model_path, split = "test";
  std::int64_t limit = 0;
  add_common(attack_cmd);
  attack_cmd->add_option("--model", model_path, "model checkpoint")->required();
  add_attack_flags(attack_cmd, aflags);
  attack_cmd->add_option("--split", split, "train|val|test");
  attack_cmd->add_option("--limit", limit, "attack only the first N examples");

  // detect-eval
  auto* detect_cmd = app.add_subcommand("detect-eval", "calibrate the detector");
  std::string detect_model;
  double percentile = 0.95;
  add_common(detect_cmd);
  detect_cmd->add_option("--model", detect_model)->required();
  detect_cmd->add_option("--percentile", percentile);

  // analyze with subsubcommands
  auto* analyze_cmd = app.add_subcommand("analyze", "measurement procedures");
  analyze_cmd->require_subcommand(1);

  auto* votes_cmd = analyze_cmd->add_subcommand("votes", "vote agreement histogram");
  std::string votes_model, votes_adv, selector = "gt";
  bool successful_only = false;
  add_common(votes_cmd);
  votes_cmd->add_option("--model", votes_model)->required();
  votes_cmd->add_option("--adv", votes_adv, "attack output directory");
  votes_cmd->add_option("--class-selector", selector, "gt|lngt");
  votes_cmd->add_flag("--successful-only", successful_only);

  auto* norms_cmd = analyze_cmd->add_subcommand("norms", "perturbation norms");
  std::string norms_adv;
  add_common(norms_cmd);
  norms_cmd->add_option("--adv", norms_adv)->required();

  auto* transfer_cmd = analyze_cmd->add_subcommand("transfer", "transfer rate");
  std::string transfer_adv, transfer_model;
  add_common(transfer_cmd);
  transfer_cmd->add_option("--adv", transfer_adv)->required();
  transfer_cmd->add_option("--model", transfer_model, "target model")->required();

  auto* affine_cmd = analyze_cmd->add_subcommand("affine", "affine robustness");
  std::string affine_model;
  std::int64_t translate = 2;
  double rotate = 30.0;
  AttackFlags affine_attack;
  add_common(affine_cmd);
  affine_cmd->add_option("--model", affine_model)->required();
  affine_cmd->add_option("--translate", translate, "max translation, px");
  affine_cmd->add_option("--rotate", rotate, "max rotation, degrees");
  add_attack_flags(affine_cmd, affine_attack);

  // bench
  auto* bench_cmd = app.add_subcommand("bench", "attack timing");
  std::string bench_model;
  std::int64_t bench_limit = 0, bench_warmup = 5;
  AttackFlags bench_attack;
  add_common(bench_cmd);
  bench_cmd->add_option("--model", bench_model)->required();
  add_attack_flags(bench_cmd, bench_attack);
  bench_cmd->add_option("--limit", bench_limit);
  bench_cmd->add_option("--warmup", bench_warmup);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << e.what() << "\n";
    return 2;
  }

  try {
    const json cfg = load_config(common.config_path);
    if (*train_cmd)
      return cmd_train(common, cfg, raw_argv, *train_cmd, tc, at_mode, loss_kind);
    if (*attack_cmd)
      return cmd_attack(common, cfg, raw_argv, *attack_cmd, aflags, model_path,
                        split, limit);
    if (*detect_cmd)
      return cmd_detect_eval(common, cfg, raw_argv, detect_model, percentile);
    if (*votes_cmd)
      return cmd_analyze_votes(common, cfg, raw_argv, votes_model, votes_adv,
                               selector, successful_only);
    if (*norms_cmd) return cmd_analyze_norms(common, raw_argv, norms_adv);
    if (*transfer_cmd)
      return cmd_analyze_transfer(common, raw_argv, transfer_adv, transfer_model);
    if (*affine_cmd)
      return cmd_analyze_affine(common, cfg, raw_argv, *affine_cmd, affine_attack,
                                affine_model, translate, rotate,
                                affine_cmd->count("--attack") > 0 ||
                                    affine_cmd->count("--eps") > 0);
    if (*bench_cmd)
      return cmd_bench(common, cfg, raw_argv, *bench_cmd, bench_attack,
                       bench_model, bench_limit, bench_warmup);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
