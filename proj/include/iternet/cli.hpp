#pragma once

#include <CLI11.hpp>

#include <cstdint>
#include <cstdio>
#include <iostream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "iternet/pipeline.hpp"
#include "iternet/runtime.hpp"

namespace iternet {

namespace detail {

inline std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

/// Image files to process: a single file, the img_ files of a corpus split,
/// or every image in a directory that is not a gold/fov/pred file.
inline std::vector<fs::path> input_images(const fs::path& input, const std::string& split) {
  if (!split.empty()) {
    std::vector<fs::path> out;
    for (const auto& e : list_corpus(input))
      if (e.split == split) out.push_back(e.image);
    if (out.empty()) throw std::runtime_error("no '" + split + "' entries in corpus " + input.string());
    return out;
  }
  if (fs::is_regular_file(input)) return {input};
  if (!fs::exists(input)) throw std::runtime_error("input not found: " + input.string());
  std::vector<fs::path> out;
  for (const auto& [_, p] : files_by_stem(input, {"img_"})) out.push_back(p);
  if (out.empty()) throw std::runtime_error("no images in " + input.string());
  return out;
}

inline void print_timing_header(std::ostream& os) {
  os << "image         read     crop     pred  combine    write    total  patches\n";
}

inline void print_timing_row(std::ostream& os, const std::string& name, const PredictTiming& t) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-10s %8.3f %8.3f %8.3f %8.3f %8.3f %8.3f %8zu\n", name.c_str(), t.read, t.crop,
                t.pred, t.combine, t.write, t.read + t.crop + t.pred + t.combine + t.write, t.patches);
  os << buf;
}

}  // namespace detail

/// Entry point shared by the executable and the tests. Returns the exit code.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"IterNet retinal vessel segmentation: synthetic corpus, training, prediction, masks, evaluation"};
  app.name("iternet");
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out_dir = "out";
  app.add_option("--config", config_path, "run config (section.key = value lines)");
  app.add_option("--seed", seed, "overrides data.seed for synth and train.seed for train");
  app.add_option("--out", out_dir, "output root")->capture_default_str();

  auto* synth = app.add_subcommand("synth", "write a synthetic corpus with a train/test manifest");

  auto* train = app.add_subcommand("train", "train on the train split of a corpus");
  std::string corpus;
  train->add_option("--corpus", corpus, "corpus directory (default: data.corpus)");

  auto* predict_cmd = app.add_subcommand("predict", "probability maps for one image or a directory");
  std::string checkpoint, input, split;
  predict_cmd->add_option("--checkpoint", checkpoint, "trained weights")->required();
  predict_cmd->add_option("--input", input, "image file or directory")->required();
  predict_cmd->add_option("--split", split, "only this manifest split of a corpus directory");

  auto* mask_cmd = app.add_subcommand("mask", "field-of-view masks by thresholding");
  std::string mask_input;
  std::optional<double> threshold;
  mask_cmd->add_option("--input", mask_input, "image file or directory")->required();
  mask_cmd->add_option("--threshold", threshold, "default: data.fov_threshold");

  auto* eval_cmd = app.add_subcommand("eval", "metrics and curves for a directory of predictions");
  std::string pred_dir, gold_dir, mask_dir, eval_split;
  eval_cmd->add_option("--pred", pred_dir, "prediction directory")->required();
  eval_cmd->add_option("--gold", gold_dir, "gold directory")->required();
  eval_cmd->add_option("--mask", mask_dir, "FoV mask directory (omit to score every pixel)");
  eval_cmd->add_option("--split", eval_split, "only gold stems of this manifest split");

  for (auto* sub : {synth, train, predict_cmd, mask_cmd, eval_cmd}) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "iternet: error: " << detail::one_line(e.what()) << " (see --help)\n";
    return 2;
  }

  try {
    RunConfig cfg = config_path.empty() ? RunConfig{} : load_config(config_path);
    const fs::path root(out_dir);
    tune_allocator();

    if (*synth) {
      if (seed) cfg.data.seed = *seed;
      cfg.validate();
      write_split_corpus(root, cfg);
      out << "wrote " << cfg.data.count << " samples (" << cfg.data.train_count << " train) to " << root.string()
          << "\n";
    } else if (*train) {
      if (seed) cfg.train.seed = *seed;
      cfg.validate();
      const fs::path corpus_dir = corpus.empty() ? fs::path(cfg.data.corpus) : fs::path(corpus);
      if (!fs::is_directory(corpus_dir)) throw std::runtime_error("corpus directory not found: " + corpus_dir.string());
      fs::create_directories(root);
      {
        std::ofstream c(root / "config.ini", std::ios::trunc);
        c << serialize_config(cfg);
        if (!c) throw std::runtime_error("cannot write " + (root / "config.ini").string());
      }
      const TrainOutcome res = run_training(cfg, corpus_dir, root);
      if (!res.log.empty()) {
        char buf[96];
        std::snprintf(buf, sizeof buf, "step %zu total_loss %.6f\n", res.log.back().step, res.log.back().total);
        out << buf;
      }
      out << "checkpoint " << (root / cfg.train.checkpoint).string() << "\n";
    } else if (*predict_cmd) {
      cfg.validate();
      const auto store = load_checkpoint(checkpoint, cfg.model_config());
      const auto files = detail::input_images(input, split);
      detail::print_timing_header(out);
      PredictTiming sum;
      for (const auto& f : files) {
        const PredictTiming t = predict_file(store, cfg, f, root);
        detail::print_timing_row(out, sample_stem(f), t);
        sum.read += t.read;
        sum.crop += t.crop;
        sum.pred += t.pred;
        sum.combine += t.combine;
        sum.write += t.write;
        sum.patches += t.patches;
      }
      if (files.size() > 1) detail::print_timing_row(out, "total", sum);
    } else if (*mask_cmd) {
      const float th = static_cast<float>(threshold.value_or(cfg.data.fov_threshold));
      fs::create_directories(root);
      std::vector<fs::path> files = detail::input_images(mask_input, "");
      for (const auto& f : files) {
        save_image(generate_fov_mask(load_image(f), th), root / ("fov_" + sample_stem(f) + ".png"));
      }
      out << "wrote " << files.size() << " mask(s) to " << root.string() << "\n";
    } else if (*eval_cmd) {
      cfg.validate();
      std::set<std::string> only;
      if (!eval_split.empty()) {
        for (const auto& e : list_corpus(gold_dir))
          if (e.split == eval_split) only.insert(e.stem);
        if (only.empty()) throw std::runtime_error("no '" + eval_split + "' entries in corpus " + gold_dir);
      }
      const EvalReport rep = evaluate_dirs(cfg, pred_dir, gold_dir, mask_dir, root, only);
      write_report_csv(out, rep);
    }
  } catch (const std::exception& e) {
    err << "iternet: error: " << detail::one_line(e.what()) << "\n";
    return 1;
  }
  return 0;
}

}  // namespace iternet
