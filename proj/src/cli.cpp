#include "poisonlab/cli.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"
#include "poisonlab/harness.hpp"

namespace poisonlab {

using nlohmann::json;

namespace {

namespace fs = std::filesystem;

// Atomic-ish text write: stage to a sibling temp file, then rename, so a
// failure mid-write never leaves a partial artifact behind.
void write_text(const fs::path& path, const std::string& content) {
  fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw IoError("cannot write " + tmp.string());
    os << content;
    if (!os) throw IoError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

struct CommonFlags {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out_dir = "out";
  int verbosity = 0;
};

void add_common(CLI::App* sub, CommonFlags& flags) {
  sub->add_option("--config", flags.config_path, "JSON config file (defaults used if omitted)");
  sub->add_option("--set", flags.overrides,
                  "dotted-path override, e.g. --set attack.k=64 (repeatable)");
  sub->add_option("--out", flags.out_dir, "output directory");
  sub->add_flag("-v,--verbose", flags.verbosity, "print progress to stderr");
}

ExperimentConfig resolve_config(const CommonFlags& flags) {
  json j = json::object();
  if (!flags.config_path.empty()) {
    std::ifstream is(flags.config_path);
    if (!is) throw ConfigError("cannot read config file " + flags.config_path);
    try {
      j = json::parse(is);
    } catch (const json::exception& e) {
      throw ConfigError("config file " + flags.config_path + ": " + e.what());
    }
  }
  for (const std::string& kv : flags.overrides) {
    apply_override(j, kv);
  }
  return config_from_json(j);
}

void echo_config(const CommonFlags& flags, const ExperimentConfig& cfg) {
  write_text(fs::path(flags.out_dir) / "config_echo.json", config_to_json(cfg).dump(2) + "\n");
}

void note(const CommonFlags& flags, const std::string& msg) {
  if (flags.verbosity > 0) std::cerr << msg << "\n";
}

Matrix clean_train_features(const FeatureExtractor& f, const Dataset& ds) {
  const auto train = ds.with_tag(Split::train);
  Matrix X(train.size(), ds.input_dim);
  for (std::size_t i = 0; i < train.size(); ++i) {
    std::copy(train[i]->x.begin(), train[i]->x.end(), X.row(i));
  }
  return extract_features_batch(f, X);
}

PoisonConfig poison_config_from(const ExperimentConfig& cfg, const FeatureExtractor& f,
                                const Matrix* clean_features) {
  PoisonConfig pcfg;
  pcfg.mu = make_mu(mu_kind_from_name(cfg.attack.mu), f.feature_dim(), clean_features);
  pcfg.beta = cfg.attack.beta;
  pcfg.max_iters = cfg.attack.max_iters;
  pcfg.lr = cfg.attack.lr;
  pcfg.lr_adapt = cfg.attack.lr_adapt;
  pcfg.early_stop_tol = cfg.attack.early_stop_tol;
  pcfg.clip_to_scale = cfg.attack.clip_to_scale;
  pcfg.mode = collision_mode_from_name(cfg.attack.mode);
  return pcfg;
}

void cmd_gen_data(const CommonFlags& flags) {
  const ExperimentConfig cfg = resolve_config(flags);
  echo_config(flags, cfg);
  Dataset main_ds = generate_synthetic(cfg.dataset.per_class, cfg.dataset.num_classes,
                                    cfg.dataset.input_dim, cfg.dataset.scale,
                                    derive_seed(cfg.seed, "data"), cfg.dataset.noise_level);
  split_dataset(main_ds, derive_seed(cfg.seed, "split"));
  Dataset aux = generate_synthetic(cfg.dataset.aux_per_class, cfg.dataset.aux_num_classes,
                                   cfg.dataset.input_dim, cfg.dataset.scale,
                                   derive_seed(cfg.seed, "aux-data"), cfg.dataset.noise_level,
                                   cfg.dataset.num_classes);
  save_dataset(fs::path(flags.out_dir) / "dataset", main_ds);
  save_dataset(fs::path(flags.out_dir) / "aux_dataset", aux);
  std::cout << "gen-data: " << main_ds.instances.size() << " main + " << aux.instances.size()
            << " aux instances -> " << flags.out_dir << "\n";
}

void cmd_pretrain(const CommonFlags& flags, const std::string& data_dir) {
  const ExperimentConfig cfg = resolve_config(flags);
  echo_config(flags, cfg);
  const fs::path root = data_dir.empty() ? fs::path(flags.out_dir) : fs::path(data_dir);
  Dataset aux = load_dataset(root / "aux_dataset");
  note(flags, "pretraining extractor on " + std::to_string(aux.instances.size()) + " instances");
  FeatureExtractor f = pretrain_extractor(aux, cfg.extractor, derive_seed(cfg.seed, "pretrain"));
  save_extractor(fs::path(flags.out_dir) / "extractor", f);
  std::cout << "pretrain: aux validation accuracy " << f.aux_val_accuracy << " -> "
            << flags.out_dir << "/extractor\n";
}

void cmd_craft(const CommonFlags& flags, const std::string& data_dir,
               const std::string& extractor_dir) {
  const ExperimentConfig cfg = resolve_config(flags);
  echo_config(flags, cfg);
  const fs::path root = data_dir.empty() ? fs::path(flags.out_dir) : fs::path(data_dir);
  const fs::path fdir =
      extractor_dir.empty() ? fs::path(flags.out_dir) / "extractor" : fs::path(extractor_dir);
  Dataset ds = load_dataset(root / "dataset");
  FeatureExtractor f = load_extractor(fdir);
  Matrix features = clean_train_features(f, ds);
  PoisonConfig pcfg = poison_config_from(cfg, f, &features);
  note(flags, "crafting " + std::to_string(cfg.attack.k) + " poisons");
  PoisonBatch batch = craft_poison_set(f, ds, pcfg, cfg.attack.k, derive_seed(cfg.seed, "craft"),
                                       cfg.attack.balance, cfg.workers);
  save_poison_batch(fs::path(flags.out_dir) / "poisons", batch);
  save_dataset(fs::path(flags.out_dir) / "poisoned_dataset", ds);
  std::cout << "craft: " << batch.records.size() << " poisons, summed objective "
            << batch.summed_initial_objective() << " -> " << batch.summed_final_objective()
            << "\n";
}

void write_run_artifacts(const CommonFlags& flags, const ExperimentOutcome& outcome) {
  const fs::path out(flags.out_dir);
  write_text(out / "report.json", report_to_json(outcome.report).dump(2) + "\n");
  write_text(out / "trace_clean.csv", trace_to_csv(outcome.clean_trace));
  write_text(out / "trace_poisoned.csv", trace_to_csv(outcome.poisoned_trace));
  write_text(out / "pca.csv", pca_to_csv(outcome.pca, outcome.pca_labels));
  save_poison_batch(out / "poisons", outcome.batch);
}

void cmd_run(const CommonFlags& flags) {
  const ExperimentConfig cfg = resolve_config(flags);
  echo_config(flags, cfg);
  note(flags, "running full experiment (seed " + std::to_string(cfg.seed) + ")");
  ExperimentOutcome outcome = run_experiment(cfg);
  write_run_artifacts(flags, outcome);
  const ExperimentReport& r = outcome.report;
  std::cout << "run: accuracy_clean=" << r.accuracy_clean
            << " accuracy_poisoned=" << r.accuracy_poisoned
            << " success_rate_poison=" << r.success_rate_poison
            << " success_rate_random=" << r.success_rate_random << "\n";
}

void cmd_defend(const CommonFlags& flags) {
  const ExperimentConfig cfg = resolve_config(flags);
  echo_config(flags, cfg);
  auto [frozen, unfrozen] = run_defense(cfg);
  const fs::path out(flags.out_dir);
  write_text(out / "report_frozen.json", report_to_json(frozen).dump(2) + "\n");
  write_text(out / "report_unfrozen.json", report_to_json(unfrozen).dump(2) + "\n");
  std::cout << "defend: poisoned=" << frozen.accuracy_poisoned
            << " defended=" << unfrozen.accuracy_poisoned << " clean=" << frozen.accuracy_clean
            << "\n";
}

void cmd_baseline(const CommonFlags& flags) {
  const ExperimentConfig cfg = resolve_config(flags);
  echo_config(flags, cfg);
  const std::size_t train_count =
      static_cast<std::size_t>(cfg.dataset.num_classes) *
      static_cast<std::size_t>(std::lround(0.8 * static_cast<double>(cfg.dataset.per_class)));
  const std::size_t pool_size = train_count + cfg.attack.k - cfg.al.seed_set_size;
  BaselineEstimate est = random_baseline_detailed(pool_size, cfg.attack.k, cfg.al.budget,
                                                  cfg.baseline_trials,
                                                  derive_seed(cfg.seed, "baseline"));
  json j;
  j["pool_size"] = pool_size;
  j["k"] = cfg.attack.k;
  j["budget"] = cfg.al.budget;
  j["trials"] = est.trials;
  j["mean"] = est.mean;
  j["std_error"] = est.std_error;
  j["expectation"] = static_cast<double>(cfg.al.budget) / static_cast<double>(pool_size);
  write_text(fs::path(flags.out_dir) / "baseline.json", j.dump(2) + "\n");
  std::cout << "baseline: mean=" << est.mean << " expectation=" << j["expectation"].get<double>()
            << " std_error=" << est.std_error << "\n";
}

void cmd_pca(const CommonFlags& flags, const std::string& data_dir,
             const std::string& extractor_dir) {
  const ExperimentConfig cfg = resolve_config(flags);
  echo_config(flags, cfg);
  if (data_dir.empty() || extractor_dir.empty()) {
    throw ConfigError("pca requires --data <dataset dir> and --extractor <dir>");
  }
  Dataset ds = load_dataset(data_dir);
  FeatureExtractor f = load_extractor(extractor_dir);
  const auto train = ds.with_tag(Split::train);
  Matrix X(train.size(), ds.input_dim);
  std::vector<std::uint8_t> flags_vec(train.size());
  std::vector<int> labels(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) {
    std::copy(train[i]->x.begin(), train[i]->x.end(), X.row(i));
    flags_vec[i] = train[i]->is_poison ? 1 : 0;
    labels[i] = train[i]->label;
  }
  PcaProjection proj = pca_project(extract_features_batch(f, X), flags_vec);
  write_text(fs::path(flags.out_dir) / "pca.csv", pca_to_csv(proj, labels));
  std::cout << "pca: explained fractions " << proj.explained[0] << ", " << proj.explained[1]
            << "\n";
}

void cmd_report(const CommonFlags& flags, const std::vector<std::string>& paths) {
  std::vector<fs::path> files(paths.begin(), paths.end());
  const std::string table = aggregate_reports(files);
  write_text(fs::path(flags.out_dir) / "table.csv", table);
  std::cout << table;
}

}  // namespace

std::string aggregate_reports(const std::vector<std::filesystem::path>& paths) {
  if (paths.empty()) {
    throw ConfigError("aggregate_reports: need at least one report file");
  }
  std::vector<ExperimentReport> reports;
  for (const auto& path : paths) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot read report " + path.string());
    json j;
    try {
      j = json::parse(is);
    } catch (const json::exception& e) {
      throw IoError("report " + path.string() + ": " + e.what());
    }
    if (j.value("schema", "") != "poisonlab-report-1") {
      throw IoError("report schema mismatch in " + path.string());
    }
    reports.push_back(report_from_json(j));
  }
  std::sort(reports.begin(), reports.end(), [](const ExperimentReport& a,
                                               const ExperimentReport& b) {
    if (a.dataset != b.dataset) return a.dataset < b.dataset;
    return a.model < b.model;
  });
  std::string out = report_csv_header() + "\n";
  for (const auto& r : reports) out += report_csv_row(r) + "\n";
  return out;
}

int dispatch(const std::vector<std::string>& args) {
  CLI::App app{"feature-collision poisoning laboratory for active transfer learning"};
  app.require_subcommand(1);

  CommonFlags flags;
  std::string data_dir;
  std::string extractor_dir;
  std::vector<std::string> report_paths;

  CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic task datasets");
  add_common(gen, flags);

  CLI::App* pre = app.add_subcommand("pretrain", "pretrain the frozen feature extractor");
  add_common(pre, flags);
  pre->add_option("--data", data_dir, "gen-data output root (default: --out)");

  CLI::App* craft = app.add_subcommand("craft", "craft feature-collision poisons");
  add_common(craft, flags);
  craft->add_option("--data", data_dir, "gen-data output root (default: --out)");
  craft->add_option("--extractor", extractor_dir, "extractor checkpoint dir");

  CLI::App* run = app.add_subcommand("run", "run the full experiment pipeline");
  add_common(run, flags);

  CLI::App* defend = app.add_subcommand("defend", "run the adversarial-retraining defense");
  add_common(defend, flags);

  CLI::App* base = app.add_subcommand("baseline", "estimate the random-selection baseline");
  add_common(base, flags);

  CLI::App* pca = app.add_subcommand("pca", "project dataset features onto top-2 PCs");
  add_common(pca, flags);
  pca->add_option("--data", data_dir, "dataset dir (e.g. .../poisoned_dataset)");
  pca->add_option("--extractor", extractor_dir, "extractor checkpoint dir");

  CLI::App* rep = app.add_subcommand("report", "aggregate experiment reports into a CSV table");
  add_common(rep, flags);
  rep->add_option("reports", report_paths, "report.json files")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);

    if (gen->parsed()) {
      cmd_gen_data(flags);
    } else if (pre->parsed()) {
      cmd_pretrain(flags, data_dir);
    } else if (craft->parsed()) {
      cmd_craft(flags, data_dir, extractor_dir);
    } else if (run->parsed()) {
      cmd_run(flags);
    } else if (defend->parsed()) {
      cmd_defend(flags);
    } else if (base->parsed()) {
      cmd_baseline(flags);
    } else if (pca->parsed()) {
      cmd_pca(flags, data_dir, extractor_dir);
    } else if (rep->parsed()) {
      cmd_report(flags, report_paths);
    }
    return 0;
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << "\n";
    return 2;
  } catch (const ConfigError& e) {
    std::cerr << "error: config: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "error: numeric: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace poisonlab
