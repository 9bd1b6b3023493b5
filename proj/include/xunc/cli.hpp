#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "xunc/config.hpp"
#include "xunc/data_io.hpp"
#include "xunc/error.hpp"
#include "xunc/expl_uncertainty.hpp"
#include "xunc/metrics.hpp"
#include "xunc/train.hpp"
#include "xunc/uncertainty.hpp"

namespace xunc::cli {

namespace fs = std::filesystem;
using Real = float;

// Stream ids under the run seed, one per pipeline stage.
enum SeedStream : std::uint64_t { split_seed = 1, build_seed, train_seed, explain_seed, eval_seed, test_seed };

struct Data {
  Dataset<Real> train;
  Dataset<Real> test;
  std::size_t outputs = 1;
};

inline Data prepare_data(const RunConfig& rc) {
  Dataset<Real> all;
  switch (rc.dataset.kind) {
    case DatasetKind::synthetic_squares:
      all = synthetic_squares<Real>(rc.dataset.num_samples, rc.seed);
      break;
    case DatasetKind::images:
      all = load_images<Real>(rc.dataset.path);
      break;
    case DatasetKind::csv:
      all = load_csv<Real>(rc.dataset.path, rc.dataset.target_column);
      break;
  }
  all.validate();
  const auto split = split_indices(all.size(), 1.0 - rc.dataset.test_fraction, 0.0,
                                   derive_seed(rc.seed, split_seed));
  if (split.train.empty() || split.test.empty()) {
    throw ConfigError("dataset of " + std::to_string(all.size()) +
                      " rows is too small to split");
  }
  Data d{all.subset(split.train), all.subset(split.test), 1};
  if (rc.dataset.kind == DatasetKind::csv && rc.dataset.standardize) {
    const auto n = fit_standardizer(d.train);
    apply_normalization(d.train, n);
    apply_normalization(d.test, n);
  }
  if (rc.task == Task::classification) {
    d.outputs = std::max(all.num_classes(), d.train.num_classes());
    if (d.outputs < 2) throw ConfigError("classification needs at least two classes");
  }
  return d;
}

inline std::string method_dir(const RunConfig& rc) {
  return std::string(to_string(rc.uncertainty.method));
}

inline fs::path checkpoint_dir(const RunConfig& rc) {
  return rc.output_dir / "checkpoints" / method_dir(rc);
}

inline UncertaintyModel<Real> load_checkpoint(const RunConfig& rc) {
  const auto dir = checkpoint_dir(rc);
  if (!fs::exists(dir / "manifest.json")) {
    throw ConfigError("checkpoint not found: " + dir.string() + " (run train first)");
  }
  auto um = load_uncertainty_model<Real>(dir);
  if (um.config.method != rc.uncertainty.method) {
    throw ConfigError("checkpoint in " + dir.string() + " was trained with " +
                      std::string(to_string(um.config.method)));
  }
  // Sample count comes from the run config, not the training run.
  um.config.num_samples = rc.uncertainty.num_samples;
  return um;
}

inline std::string fmt(double v) { return format_double(v); }

/// Mean-of-samples prediction quality on the test split: accuracy or MAE.
inline double test_score(const UncertaintyModel<Real>& um, const Dataset<Real>& test,
                         std::size_t T, std::uint64_t seed) {
  double acc = 0.0;
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto mean = aggregate(predict_samples(um, test.inputs[i], T, derive_seed(seed, i))).mean;
    if (um.task() == Task::classification) {
      acc += argmax<Real>(mean.values()) == static_cast<std::size_t>(test.targets[i]);
    } else {
      acc += std::abs(mean[0] - test.targets[i]);
    }
  }
  return acc / static_cast<double>(test.size());
}

inline int cmd_train(const RunConfig& rc, std::ostream& out) {
  const auto data = prepare_data(rc);
  const auto tmpl = build_architecture<Real>(rc, data.train.inputs.front().shape(), data.outputs);
  auto um = build(tmpl, rc.uncertainty, derive_seed(rc.seed, build_seed));
  TrainConfig tc = rc.training;
  tc.seed = derive_seed(rc.seed, train_seed);
  const auto logs = train_uncertainty<Real>(um, data.train.inputs, data.train.targets, tc);

  const auto ckpt = checkpoint_dir(rc);
  const auto tdir = rc.output_dir / "train" / method_dir(rc);
  fs::create_directories(tdir);
  save_uncertainty_model(ckpt, um);

  std::ostringstream log;
  log << "member,epoch,loss,metric\n";
  for (std::size_t k = 0; k < logs.size(); ++k) {
    for (const auto& e : logs[k].epochs) {
      log << k << ',' << e.epoch << ',' << fmt(e.loss) << ',' << fmt(e.metric) << '\n';
    }
  }
  io::write_text(tdir / "train_log.csv", log.str());

  const double score = test_score(um, data.test, rc.uncertainty.samples(),
                                  derive_seed(rc.seed, test_seed));
  const char* key = rc.task == Task::classification ? "test_accuracy" : "test_mae";
  nlohmann::ordered_json summary;
  summary["uncertainty"] = to_string(rc.uncertainty.method);
  summary["num_train"] = data.train.size();
  summary["num_test"] = data.test.size();
  summary["num_parameters"] = um.members.front().parameter_count();
  summary[key] = score;
  io::write_text(tdir / "summary.json", summary.dump(2) + "\n");
  out << "trained " << to_string(rc.uncertainty.method) << " (" << um.members.size()
      << " member" << (um.members.size() == 1 ? "" : "s") << "), " << key << " = " << fmt(score)
      << "\ncheckpoint: " << ckpt.string() << '\n';
  return 0;
}

inline ExplanationConfig explanation_config(const RunConfig& rc) {
  ExplanationConfig ec;
  ec.method = rc.explanation.method;
  ec.selector.mode = rc.explanation.target;
  ec.selector.ground_truth_index = rc.explanation.label;
  ec.ig.steps = rc.explanation.ig_steps;
  ec.lime = rc.explanation.lime;
  ec.lime.seed = derive_seed(rc.seed, explain_seed);
  return ec;
}

template <typename V>
nlohmann::json to_json_array(const Tensor<V>& t) {
  return nlohmann::json(std::vector<double>(t.data().begin(), t.data().end()));
}

inline int cmd_explain(const RunConfig& rc, std::ostream& out) {
  const auto um = load_checkpoint(rc);
  const auto data = prepare_data(rc);
  const std::size_t T = rc.uncertainty.samples();
  const auto base = rc.output_dir / "explain" / method_dir(rc) /
                    std::string(to_string(rc.explanation.method));
  for (auto idx : rc.explanation.inputs) {
    if (idx >= data.test.size()) {
      throw ConfigError("explanation input " + std::to_string(idx) + " is outside the test split (" +
                        std::to_string(data.test.size()) + " rows)");
    }
    const auto& x = data.test.inputs[idx];
    auto ec = explanation_config(rc);
    if (ec.selector.mode == TargetMode::ground_truth && !ec.selector.ground_truth_index) {
      if (rc.task != Task::classification) ec.selector.ground_truth_index = 0;
      else ec.selector.ground_truth_index = static_cast<std::size_t>(data.test.targets[idx]);
    }
    const auto dist = explanation_distribution(um, x, ec, T, derive_seed(derive_seed(rc.seed, explain_seed), idx));
    const auto st = stats(dist);
    const auto dir = base / ("input_" + std::to_string(idx));
    fs::create_directories(dir);
    for (std::size_t t = 0; t < dist.samples.size(); ++t) {
      std::ostringstream name;
      name << "saliency_" << std::setw(3) << std::setfill('0') << t << ".xten";
      save_tensor(dir / name.str(), dist.samples[t].values);
    }
    const std::pair<const char*, const Tensor<Real>*> maps[] = {
        {"mean", &st.mean}, {"std", &st.std}, {"cv", &st.cv}};
    for (const auto& [name, t] : maps) {
      save_tensor(dir / (std::string(name) + ".xten"), *t);
      export_heatmap(dir / (std::string(name) + ".pgm"), *t,
                     std::string(name) == "mean" ? rc.explanation.heatmap_norm : HeatmapNorm::minmax);
    }
    if (x.rank() == 3 && (x.dim(0) == 1 || x.dim(0) == 3)) write_image(dir / (x.dim(0) == 1 ? "input.pgm" : "input.ppm"), x);
    nlohmann::ordered_json s;
    s["input"] = idx;
    s["label"] = data.test.targets[idx];
    s["method"] = to_string(dist.method);
    s["uncertainty"] = to_string(um.config.method);
    s["target_mode"] = to_string(dist.target_mode);
    s["target"] = dist.samples.front().target_index;
    s["num_samples"] = dist.samples.size();
    s["mean_prediction"] = to_json_array(dist.mean_prediction);
    io::write_text(dir / "summary.json", s.dump(2) + "\n");
    out << "explained input " << idx << " (target " << dist.samples.front().target_index
        << ", " << dist.samples.size() << " samples): " << dir.string() << '\n';
  }
  return 0;
}

inline int cmd_evaluate(const RunConfig& rc, std::ostream& out, std::ostream& err) {
  if (rc.task != Task::classification) {
    throw ConfigError("evaluate needs a classification task (curves score class probabilities)");
  }
  const auto um = load_checkpoint(rc);
  const auto data = prepare_data(rc);
  const std::size_t n = std::min(rc.metrics.max_images, data.test.size());
  std::vector<Tensor<Real>> images(data.test.inputs.begin(), data.test.inputs.begin() + n);
  const auto all_labels = data.test.labels();
  std::vector<std::size_t> labels(all_labels.begin(), all_labels.begin() + n);

  ReportOptions opt;
  opt.explanation = explanation_config(rc);
  opt.explanation.selector.ground_truth_index.reset();
  opt.perturbation = rc.metrics.perturbation;
  opt.num_samples = rc.uncertainty.samples();
  opt.seed = derive_seed(rc.seed, eval_seed);
  opt.num_classes = data.outputs;
  if (opt.perturbation.deletion_fill == DeletionFill::dataset_mean &&
      opt.perturbation.fill_values.empty()) {
    // Per-channel mean over the training split.
    const auto& shape = data.train.inputs.front().shape();
    const std::size_t C = shape.size() == 3 ? shape[0] : 1;
    const std::size_t P = data.train.inputs.front().size() / C;
    opt.perturbation.fill_values.assign(C, 0.0);
    for (const auto& x : data.train.inputs) {
      for (std::size_t i = 0; i < x.size(); ++i) opt.perturbation.fill_values[i / P] += x[i];
    }
    for (auto& v : opt.perturbation.fill_values) v /= static_cast<double>(data.train.size() * P);
  }
  const auto rep = classwise_report(um, images, labels, opt);
  for (const auto& w : rep.warnings) err << "warning: " << w << '\n';

  const auto dir = rc.output_dir / "evaluate" / method_dir(rc) / rep.method;
  fs::create_directories(dir / "curves");
  write_report_csv(dir / "report.csv", {rep});
  for (const auto& row : rep.rows) {
    const std::string cls = "class" + std::to_string(row.label);
    std::vector<std::pair<std::string, Curve>> plot;
    const std::pair<const char*, const HeatmapAucs*> kinds[] = {{"mean", &row.mean}, {"std", &row.std}};
    for (const auto& [kind, h] : kinds) {
      write_curve_csv(dir / "curves" / (cls + "_" + kind + "_insertion.csv"), h->insertion_curve);
      write_curve_csv(dir / "curves" / (cls + "_" + kind + "_deletion.csv"), h->deletion_curve);
      plot.emplace_back(std::string("insertion ") + kind, h->insertion_curve);
      plot.emplace_back(std::string("deletion ") + kind, h->deletion_curve);
    }
    if (rc.metrics.svg) {
      io::write_text(dir / "curves" / (cls + ".svg"),
                     curves_svg(plot, rep.method + " / " + rep.uncertainty + " / " + cls));
    }
  }
  const auto avg = rep.average();
  out << rep.method << '/' << rep.uncertainty << " over " << n << " images: insertion mean "
      << fmt(avg.mean.insertion) << ", std " << fmt(avg.std.insertion) << "; deletion mean "
      << fmt(avg.mean.deletion) << ", std " << fmt(avg.std.deletion) << "\nreport: "
      << (dir / "report.csv").string() << '\n';
  return 0;
}

struct ReportLine {
  std::string method, uncertainty, cls;
  double ins_mean = 0, ins_std = 0, del_mean = 0, del_std = 0;
};

inline std::vector<ReportLine> read_report_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("report not found: " + path.string());
  std::string line;
  std::getline(in, line);
  if (detail::trim(line) != report_header()) throw FormatError(path.string() + ": unexpected header");
  std::vector<ReportLine> rows;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (detail::trim(line).empty()) continue;
    const auto c = detail::split_csv_line(std::string(detail::trim(line)), row);
    std::optional<double> v[4];
    for (int k = 0; k < 4 && c.size() == 7; ++k) v[k] = detail::parse_double(c[3 + k]);
    if (c.size() != 7 || !v[0] || !v[1] || !v[2] || !v[3]) {
      throw FormatError(path.string() + ": malformed row " + std::to_string(row));
    }
    rows.push_back({c[0], c[1], c[2], *v[0], *v[1], *v[2], *v[3]});
  }
  return rows;
}

/// Collects every evaluate report under the output dir into one markdown
/// table (class averages first, then per class) and one combined CSV.
inline int cmd_report(const RunConfig& rc, std::ostream& out) {
  const auto root = rc.output_dir / "evaluate";
  std::vector<fs::path> files;
  if (fs::is_directory(root)) {
    for (const auto& e : fs::recursive_directory_iterator(root)) {
      if (e.is_regular_file() && e.path().filename() == "report.csv") files.push_back(e.path());
    }
  }
  if (files.empty()) throw ConfigError("no evaluation reports under " + root.string() + " (run evaluate first)");
  std::sort(files.begin(), files.end());
  std::vector<ReportLine> rows;
  for (const auto& f : files) {
    auto r = read_report_csv(f);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  auto cell = [](double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(4) << v;
    return os.str();
  };
  std::ostringstream md;
  md << "# Insertion / deletion AUC\n\n"
     << "Class-averaged AUC for heatmaps of the explanation mean (E_mu) and spread (E_sigma).\n"
     << "Higher insertion and lower deletion AUC indicate a more faithful heatmap.\n\n"
     << "| Method | Uncertainty | Insert E_mu | Insert E_sigma | Delete E_mu | Delete E_sigma |\n"
     << "|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    if (r.cls != "average") continue;
    md << "| " << r.method << " | " << r.uncertainty << " | " << cell(r.ins_mean) << " | "
       << cell(r.ins_std) << " | " << cell(r.del_mean) << " | " << cell(r.del_std) << " |\n";
  }
  md << "\n## Per class\n\n"
     << "| Method | Uncertainty | Class | Insert E_mu | Insert E_sigma | Delete E_mu | Delete E_sigma |\n"
     << "|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    if (r.cls == "average") continue;
    md << "| " << r.method << " | " << r.uncertainty << " | " << r.cls << " | " << cell(r.ins_mean)
       << " | " << cell(r.ins_std) << " | " << cell(r.del_mean) << " | " << cell(r.del_std) << " |\n";
  }
  const auto dir = rc.output_dir / "report";
  fs::create_directories(dir);
  io::write_text(dir / "report.md", md.str());
  std::ostringstream csv;
  csv << report_header() << '\n';
  for (const auto& r : rows) {
    csv << r.method << ',' << r.uncertainty << ',' << r.cls << ',' << fmt(r.ins_mean) << ','
        << fmt(r.ins_std) << ',' << fmt(r.del_mean) << ',' << fmt(r.del_std) << '\n';
  }
  io::write_text(dir / "report.csv", csv.str());
  out << "combined " << files.size() << " report(s): " << (dir / "report.md").string() << '\n';
  return 0;
}

struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out, method, uncertainty, target;
  std::optional<std::size_t> label, input;
};

inline RunConfig resolve(const Overrides& o) {
  RunConfig rc = load_run_config(o.config);
  if (o.seed) rc.seed = *o.seed;
  if (o.out) rc.output_dir = *o.out;
  if (o.method) rc.explanation.method = explanation_method_from_string(*o.method);
  if (o.uncertainty) rc.uncertainty.method = uncertainty_method_from_string(*o.uncertainty);
  if (o.target) rc.explanation.target = target_mode_from_string(*o.target);
  if (o.label) {
    rc.explanation.label = *o.label;
    if (!o.target) rc.explanation.target = TargetMode::ground_truth;
  }
  if (o.input) rc.explanation.inputs = {*o.input};
  return rc;
}

/// Exit codes: 0 success, 1 internal or numerical failure, 2 usage or
/// configuration error.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"Explanation uncertainty toolkit: train, explain, evaluate, report"};
  app.require_subcommand(1);
  Overrides o;
  auto* train = app.add_subcommand("train", "train the uncertainty model and write a checkpoint");
  auto* explain = app.add_subcommand("explain", "explanation distributions and their mean/std/cv maps");
  auto* evaluate = app.add_subcommand("evaluate", "insertion/deletion curves and the per-class report");
  auto* report = app.add_subcommand("report", "combine evaluation reports into one table");
  for (auto* sub : {train, explain, evaluate, report}) {
    sub->add_option("--config", o.config, "run config (JSON)")->required();
    sub->add_option("--seed", o.seed, "override the config seed");
    sub->add_option("--out", o.out, "override the output directory");
    sub->add_option("--method", o.method, "explanation method")->check(CLI::IsMember({"gbp", "ig", "lime"}));
    sub->add_option("--uncertainty", o.uncertainty, "uncertainty method")
        ->check(CLI::IsMember({"ensemble", "mc_dropout", "mc_dropconnect", "flipout"}));
    sub->add_option("--target", o.target, "target neuron")
        ->check(CLI::IsMember({"predicted", "ground-truth"}));
    sub->add_option("--label", o.label, "ground-truth class index (implies --target ground-truth)");
    sub->add_option("--input", o.input, "explain this test-split position only");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream cout_buf, cerr_buf;
    const int code = app.exit(e, cout_buf, cerr_buf);
    out << cout_buf.str();
    err << cerr_buf.str();
    return code == 0 ? 0 : 2;
  }
  try {
    const RunConfig rc = resolve(o);
    if (*train) return cmd_train(rc, out);
    if (*explain) return cmd_explain(rc, out);
    if (*evaluate) return cmd_evaluate(rc, out, err);
    return cmd_report(rc, out);
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const ArgumentError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace xunc::cli
