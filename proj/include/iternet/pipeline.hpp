#pragma once

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "iternet/adam.hpp"
#include "iternet/config.hpp"
#include "iternet/data.hpp"
#include "iternet/image_io.hpp"
#include "iternet/metrics.hpp"
#include "iternet/model.hpp"
#include "iternet/synth.hpp"

namespace iternet {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// File naming

inline bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".pgm" || ext == ".ppm" || ext == ".pnm";
}

inline const std::vector<std::string>& role_prefixes() {
  static const std::vector<std::string> p{"img_", "gold_", "fov_", "mask_", "pred_"};
  return p;
}

/// File stem with a role prefix (img_, gold_, fov_, mask_, pred_) removed.
inline std::string sample_stem(const fs::path& p) {
  const std::string s = p.stem().string();
  for (const auto& pre : role_prefixes())
    if (s.rfind(pre, 0) == 0) return s.substr(pre.size());
  return s;
}

/// Image files of one role keyed by stem. A file qualifies when it carries
/// one of `accepted` prefixes or no role prefix at all.
inline std::map<std::string, fs::path> files_by_stem(const fs::path& dir, const std::vector<std::string>& accepted) {
  if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir.string());
  std::map<std::string, fs::path> out;
  std::vector<fs::path> entries;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_image_file(e.path())) entries.push_back(e.path());
  std::sort(entries.begin(), entries.end());
  for (const auto& p : entries) {
    const std::string name = p.stem().string();
    bool any_role = false, ok = false;
    for (const auto& pre : role_prefixes()) {
      if (name.rfind(pre, 0) != 0) continue;
      any_role = true;
      ok = std::find(accepted.begin(), accepted.end(), pre) != accepted.end();
    }
    if (!any_role || ok) {
      const std::string stem = sample_stem(p);
      if (out.count(stem)) throw std::runtime_error("two files share stem '" + stem + "' in " + dir.string());
      out[stem] = p;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Corpus

struct CorpusEntry {
  std::string stem;
  fs::path image, gold, fov;
  std::string split = "train";
};

/// Scans a corpus directory holding img_/gold_/fov_ files; the split comes
/// from manifest.csv when present, otherwise every entry is "train".
inline std::vector<CorpusEntry> list_corpus(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw std::runtime_error("corpus directory not found: " + dir.string());
  const auto imgs = files_by_stem(dir, {"img_"});
  const auto golds = files_by_stem(dir, {"gold_"});
  const auto fovs = files_by_stem(dir, {"fov_", "mask_"});
  std::map<std::string, std::string> split;
  std::ifstream manifest(dir / "manifest.csv");
  if (manifest) {
    std::string line, header;
    std::getline(manifest, header);
    const bool has_split = header.find("split") != std::string::npos;
    while (has_split && std::getline(manifest, line)) {
      const auto comma = line.find(',');
      split[line.substr(0, comma)] = line.substr(line.rfind(',') + 1);
    }
  }
  std::vector<CorpusEntry> out;
  for (const auto& [stem, img] : imgs) {
    if (img.stem().string().rfind("img_", 0) != 0) continue;
    const auto g = golds.find(stem);
    const auto f = fovs.find(stem);
    if (g == golds.end() || g->second.stem().string().rfind("gold_", 0) != 0) {
      throw std::runtime_error("corpus: no gold_ file for image '" + stem + "'");
    }
    CorpusEntry e{stem, img, g->second, {}, "train"};
    if (f != fovs.end() && f->second.stem().string().rfind("img_", 0) != 0 &&
        f->second.stem().string().rfind("gold_", 0) != 0) {
      e.fov = f->second;
    }
    if (split.count(stem)) e.split = split[stem];
    out.push_back(std::move(e));
  }
  if (out.empty()) throw std::runtime_error("corpus: no img_ files in " + dir.string());
  return out;
}

/// Loads a sample; without a fov file the mask is generated by thresholding.
inline Sample load_sample(const CorpusEntry& e, float fov_threshold = default_fov_threshold) {
  Sample s;
  s.image = load_image(e.image);
  s.gold = load_label(e.gold);
  s.fov = e.fov.empty() ? generate_fov_mask(s.image, fov_threshold) : load_label(e.fov);
  s.validate();
  return s;
}

inline std::vector<Sample> load_split(const fs::path& dir, const std::string& split,
                                      float fov_threshold = default_fov_threshold,
                                      std::vector<std::string>* stems = nullptr) {
  std::vector<Sample> out;
  for (const auto& e : list_corpus(dir)) {
    if (e.split != split) continue;
    out.push_back(load_sample(e, fov_threshold));
    if (stems) stems->push_back(e.stem);
  }
  return out;
}

/// Synthetic corpus with the first `train_count` samples marked train and
/// the rest test.
inline void write_split_corpus(const fs::path& dir, const RunConfig& cfg) {
  fs::create_directories(dir);
  std::ofstream manifest(dir / "manifest.csv", std::ios::trunc);
  if (!manifest) throw std::runtime_error("cannot write " + (dir / "manifest.csv").string());
  manifest << "stem,seed,height,width,split\n";
  const SynthConfig sc = cfg.synth_config();
  for (std::size_t i = 0; i < cfg.data.count; ++i) {
    const std::uint64_t s = derive_seed(cfg.data.seed, i);
    const Sample sample = synth_vessel_sample(s, cfg.data.height, cfg.data.width, sc);
    const std::string stem = corpus_stem(i);
    save_image(sample.image, dir / ("img_" + stem + ".png"));
    save_image(sample.gold, dir / ("gold_" + stem + ".png"));
    save_image(sample.fov, dir / ("fov_" + stem + ".png"));
    manifest << stem << ',' << s << ',' << cfg.data.height << ',' << cfg.data.width << ','
             << (i < cfg.data.train_count ? "train" : "test") << '\n';
  }
  if (!manifest) throw std::runtime_error("failed writing manifest in " + dir.string());
}

// ---------------------------------------------------------------------------
// Training

struct LossRecord {
  std::size_t step = 0;
  double total = 0.0;
  std::vector<double> per_output;
};

struct TrainOutcome {
  ParamStore<float> store;
  std::vector<LossRecord> log;
};

/// Called after every optimizer step.
using StepHook = std::function<void(const LossRecord&, const ParamStore<float>&)>;

inline std::string format_loss_row(const LossRecord& r) {
  char buf[32];
  std::string row = std::to_string(r.step);
  std::snprintf(buf, sizeof buf, ",%.9g", r.total);
  row += buf;
  for (double v : r.per_output) {
    std::snprintf(buf, sizeof buf, ",%.9g", v);
    row += buf;
  }
  return row;
}

inline std::string loss_log_header(std::size_t outputs) {
  std::string h = "step,total_loss";
  for (std::size_t i = 1; i <= outputs; ++i) h += ",loss_out_" + std::to_string(i);
  return h;
}

/// One batch: per item a random training sample, augmented, then a random
/// patch. Draws come from `rng` only.
inline std::pair<Tensor, Tensor> draw_batch(const std::vector<Sample>& data, const AugmentConfig& aug,
                                            std::size_t batch, std::size_t patch, std::mt19937_64& rng) {
  std::vector<Tensor> images, golds;
  for (std::size_t b = 0; b < batch; ++b) {
    const auto& s = data[std::uniform_int_distribution<std::size_t>(0, data.size() - 1)(rng)];
    const Sample a = augment(s, aug, rng);
    const Sample p = sample_training_patch(a, rng, patch);
    images.push_back(p.image);
    golds.push_back(p.gold);
  }
  return {stack_batch(images), stack_batch(golds)};
}

/// Adam on the multi-output loss. Weights are initialised from
/// derive_seed(train.seed, 0); batches are drawn from derive_seed(train.seed, 1).
inline TrainOutcome train_model(const RunConfig& cfg, const std::vector<Sample>& data, const StepHook& hook = {},
                                std::optional<ParamStore<float>> init = std::nullopt) {
  cfg.validate();
  if (data.empty()) throw std::invalid_argument("train: no training samples");
  const IterNetConfig mc = cfg.model_config();
  for (const auto& s : data) {
    s.validate();
    if (s.image.dim(1) != mc.base.in_channels) {
      throw std::invalid_argument("train: sample has " + std::to_string(s.image.dim(1)) + " channels, model expects " +
                                  std::to_string(mc.base.in_channels));
    }
    if (s.height() < cfg.train.patch_size || s.width() < cfg.train.patch_size) {
      throw std::invalid_argument("train: a sample is smaller than train.patch_size");
    }
  }
  TrainOutcome out{init ? std::move(*init) : build_iternet<float>(mc, derive_seed(cfg.train.seed, 0)), {}};
  if (init) check_layout(out.store, mc);
  const AugmentConfig aug = cfg.augment_config();
  const std::vector<float> weights = cfg.loss_weights();
  OptimizerConfig opt = cfg.optimizer();
  std::mt19937_64 rng(derive_seed(cfg.train.seed, 1));
  for (std::size_t step = 1; step <= cfg.train.steps; ++step) {
    auto [images, golds] = draw_batch(data, aug, cfg.train.batch_size, cfg.train.patch_size, rng);
    LossRecord rec;
    rec.step = step;
    {
      Tape<float> tape;
      const auto fwd = iternet_forward(tape, out.store, images, mc);
      const auto terms = iternet_loss(fwd, golds, weights);
      rec.total = terms.total.value()[0];
      rec.per_output = terms.per_output;
      tape.backward(terms.total);
    }
    adam_step(out.store, opt);
    out.log.push_back(rec);
    if (hook) hook(rec, out.store);
  }
  return out;
}

inline std::string interval_checkpoint_name(const fs::path& final_path, std::size_t step) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "_step%06zu", step);
  return (final_path.parent_path() / (final_path.stem().string() + buf + final_path.extension().string())).string();
}

/// Training run writing the loss log and checkpoints under `out_dir`.
inline TrainOutcome run_training(const RunConfig& cfg, const fs::path& corpus, const fs::path& out_dir) {
  cfg.validate();
  const auto data = load_split(corpus, "train", static_cast<float>(cfg.data.fov_threshold));
  if (data.empty()) throw std::runtime_error("train: corpus " + corpus.string() + " has no train split entries");
  fs::create_directories(out_dir);
  const fs::path ckpt = out_dir / cfg.train.checkpoint;
  std::ofstream log(out_dir / cfg.train.loss_log, std::ios::trunc);
  if (!log) throw std::runtime_error("cannot write loss log in " + out_dir.string());
  log << loss_log_header(cfg.model.iterations) << '\n';
  const std::size_t interval = cfg.train.checkpoint_interval;
  auto hook = [&](const LossRecord& r, const ParamStore<float>& store) {
    log << format_loss_row(r) << '\n';
    if (interval && r.step % interval == 0 && r.step != cfg.train.steps) {
      save_checkpoint(store, interval_checkpoint_name(ckpt, r.step));
    }
  };
  TrainOutcome res = train_model(cfg, data, hook);
  save_checkpoint(res.store, ckpt.string());
  if (!log) throw std::runtime_error("failed writing loss log");
  return res;
}

// ---------------------------------------------------------------------------
// Prediction

struct PredictTiming {
  double read = 0, crop = 0, pred = 0, combine = 0, write = 0;  // seconds
  std::size_t patches = 0;
};

class Stopwatch {
 public:
  double lap() {
    const auto now = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(now - last_).count();
    last_ = now;
    return s;
  }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

inline std::size_t round_up(std::size_t v, std::size_t a) { return (v + a - 1) / a * a; }

/// Out_N of one forward pass over the whole image.
inline Tensor predict_whole(const ParamStore<float>& store, const IterNetConfig& cfg, const Tensor& image) {
  const std::size_t a = cfg.alignment(), h = image.dim(2), w = image.dim(3);
  if (h % a || w % a) {
    throw std::invalid_argument("whole-image prediction needs sides divisible by " + std::to_string(a) + "; " +
                                std::to_string(h) + "x" + std::to_string(w) + " should be padded to " +
                                std::to_string(round_up(h, a)) + "x" + std::to_string(round_up(w, a)) +
                                " or predicted in patched mode");
  }
  return predict(store, cfg, image);
}

/// Overlapping patches on a clamped-anchor grid, averaged back together.
inline Tensor predict_patched(const ParamStore<float>& store, const IterNetConfig& cfg, const Tensor& image,
                              std::size_t patch, std::size_t stride, std::size_t batch = 1,
                              PredictTiming* timing = nullptr) {
  const PatchGrid grid = make_patch_grid(image.dim(2), image.dim(3), patch, stride);
  PatchAccumulator acc(1, image.dim(2), image.dim(3));
  PredictTiming local;
  PredictTiming& t = timing ? *timing : local;
  t.patches = grid.coords.size();
  Stopwatch sw;
  for (std::size_t start = 0; start < grid.coords.size(); start += batch) {
    const std::size_t end = std::min(grid.coords.size(), start + batch);
    std::vector<Tensor> crops;
    for (std::size_t i = start; i < end; ++i) crops.push_back(crop(image, grid.coords[i].row, grid.coords[i].col, patch, patch));
    const Tensor stacked = stack_batch(crops);
    t.crop += sw.lap();
    const Tensor out = predict(store, cfg, stacked);
    t.pred += sw.lap();
    const std::size_t per = patch * patch;
    for (std::size_t i = start; i < end; ++i) {
      Tensor one(Shape{1, 1, patch, patch},
                 std::vector<float>(out.values().begin() + (i - start) * per, out.values().begin() + (i - start + 1) * per));
      acc.add(grid.coords[i], one);
    }
    t.combine += sw.lap();
  }
  Tensor result = acc.result();
  t.combine += sw.lap();
  return result;
}

inline Tensor predict_image(const ParamStore<float>& store, const RunConfig& cfg, const Tensor& image,
                            PredictTiming* timing = nullptr) {
  const IterNetConfig mc = cfg.model_config();
  if (image.rank() != 4 || image.dim(1) != mc.base.in_channels) {
    throw std::invalid_argument("predict: image " + shape_string(image.shape()) + " does not have " +
                                std::to_string(mc.base.in_channels) + " channels");
  }
  if (cfg.predict.mode == PredictMode::whole) {
    Stopwatch sw;
    Tensor out = predict_whole(store, mc, image);
    if (timing) {
      timing->pred += sw.lap();
      timing->patches = 1;
    }
    return out;
  }
  return predict_patched(store, mc, image, cfg.predict.patch_size, cfg.predict.stride, cfg.predict.batch_size,
                         timing);
}

/// Reads `input`, writes pred_<stem>.png into out_dir, returns the phases.
inline PredictTiming predict_file(const ParamStore<float>& store, const RunConfig& cfg, const fs::path& input,
                                  const fs::path& out_dir) {
  PredictTiming t;
  Stopwatch sw;
  const Tensor image = load_image(input);
  t.read = sw.lap();
  const Tensor prob = predict_image(store, cfg, image, &t);
  sw.lap();
  fs::create_directories(out_dir);
  save_image(prob, out_dir / ("pred_" + sample_stem(input) + ".png"));
  t.write = sw.lap();
  return t;
}

// ---------------------------------------------------------------------------
// Evaluation over directories

struct EvalFiles {
  std::string stem;
  fs::path pred, gold, mask;
};

/// Pairs prediction, gold and mask files by stem; any stem missing from one
/// of the sets is an error naming it. A non-empty `only` limits the gold set.
inline std::vector<EvalFiles> match_eval_files(const fs::path& pred_dir, const fs::path& gold_dir,
                                               const fs::path& mask_dir, const std::set<std::string>& only = {}) {
  const auto preds = files_by_stem(pred_dir, {"pred_"});
  auto golds = files_by_stem(gold_dir, {"gold_"});
  if (!only.empty()) std::erase_if(golds, [&](const auto& kv) { return !only.count(kv.first); });
  const auto masks = mask_dir.empty() ? std::map<std::string, fs::path>{} : files_by_stem(mask_dir, {"fov_", "mask_"});
  std::vector<std::string> missing;
  for (const auto& [stem, _] : golds)
    if (!preds.count(stem)) missing.push_back(stem + " (no prediction)");
  for (const auto& [stem, _] : preds) {
    if (!golds.count(stem)) missing.push_back(stem + " (no gold)");
    else if (!mask_dir.empty() && !masks.count(stem)) missing.push_back(stem + " (no mask)");
  }
  if (!missing.empty() || preds.empty()) {
    std::string msg = "eval: unmatched stems:";
    if (missing.empty()) msg = "eval: no prediction files in " + pred_dir.string();
    for (const auto& m : missing) msg += " " + m;
    throw std::runtime_error(msg);
  }
  std::vector<EvalFiles> out;
  for (const auto& [stem, p] : preds) out.push_back({stem, p, golds.at(stem), mask_dir.empty() ? fs::path{} : masks.at(stem)});
  return out;
}

inline Tensor load_probability_map(const fs::path& p) {
  Tensor t = load_image(p);
  if (t.dim(1) != 1) throw std::runtime_error("prediction " + p.string() + " must be single-channel");
  return t;
}

/// Evaluates every matched file; writes report.csv, roc_<stem>.csv and
/// conn_<stem>.csv into out_dir when it is non-empty.
inline EvalReport evaluate_dirs(const RunConfig& cfg, const fs::path& pred_dir, const fs::path& gold_dir,
                                const fs::path& mask_dir, const fs::path& out_dir,
                                const std::set<std::string>& only = {}) {
  cfg.validate();
  const EvalOptions opt = cfg.eval_options();
  std::vector<ImageReport> rows;
  for (const auto& f : match_eval_files(pred_dir, gold_dir, mask_dir, only)) {
    const Tensor prob = load_probability_map(f.pred);
    Sample s;
    s.gold = load_label(f.gold);
    s.fov = f.mask.empty() ? Tensor(s.gold.shape(), 1.0f) : load_label(f.mask);
    s.image = Tensor(Shape{1, 1, s.gold.dim(2), s.gold.dim(3)});
    rows.push_back(evaluate(prob, s, opt, f.stem));
  }
  EvalReport rep = aggregate(std::move(rows), opt.with_mask);
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    std::ofstream report(out_dir / "report.csv", std::ios::trunc);
    write_report_csv(report, rep);
    for (const auto& r : rep.images) {
      std::ofstream roc(out_dir / ("roc_" + r.name + ".csv"), std::ios::trunc);
      write_roc_csv(roc, r.roc);
      std::ofstream con(out_dir / ("conn_" + r.name + ".csv"), std::ios::trunc);
      write_connectivity_csv(con, r.curve);
      if (!roc || !con) throw std::runtime_error("failed writing curves for " + r.name);
    }
    if (!report) throw std::runtime_error("failed writing report.csv");
  }
  return rep;
}

}  // namespace iternet
