// Command line front end: training, evaluation, latent-dimension sweeps and
// embedding export for the DBGAN graph representation learner.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <iostream>

#include "dbgan/train.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace dbgan;

namespace {

constexpr const char* kVersion = "dbgan-0.1.0";

constexpr int kExitConfig = 1;
constexpr int kExitData = 2;
constexpr int kExitDiverged = 3;

struct DatasetArgs {
  std::string edges, features, labels;
  double train_ratio = 0.85, val_ratio = 0.05, test_ratio = 0.10;
};

void set_threads(int threads) {
  if (threads <= 0) {
    if (const char* env = std::getenv("DBGAN_THREADS")) threads = std::atoi(env);
  }
  if (threads > 0) Eigen::setNbThreads(threads);
}

Graph load_dataset(const DatasetArgs& ds) {
  std::optional<std::string> labels;
  if (!ds.labels.empty()) labels = ds.labels;
  return load_graph(ds.edges, ds.features, labels);
}

json config_to_json(const TrainConfig& c) {
  return json{{"alpha", c.alpha},
              {"lambda_gp", c.lambda_gp},
              {"lr", c.lr},
              {"epochs", c.epochs},
              {"critic_steps", c.critic_steps},
              {"q", c.q},
              {"m", c.m},
              {"seed", c.seed},
              {"use_pde", c.use_pde},
              {"use_bal", c.use_bal},
              {"strict_gae", c.strict_gae},
              {"feature_loss", c.feature_loss == FeatureLoss::bce ? "bce" : "mse"},
              {"enc_hidden", c.enc_hidden},
              {"gen_hidden", c.gen_hidden},
              {"dz_hidden", c.dz_hidden},
              {"dx_hidden", c.dx_hidden},
              {"exact_threshold", c.exact_threshold},
              {"checkpoint_every", c.checkpoint_every}};
}

TrainConfig config_from_json(const json& j) {
  TrainConfig c;
  c.alpha = j.at("alpha");
  c.lambda_gp = j.at("lambda_gp");
  c.lr = j.at("lr");
  c.epochs = j.at("epochs");
  c.critic_steps = j.at("critic_steps");
  c.q = j.at("q");
  c.m = j.at("m");
  c.seed = j.at("seed");
  c.use_pde = j.at("use_pde");
  c.use_bal = j.at("use_bal");
  c.strict_gae = j.at("strict_gae");
  c.feature_loss =
      j.at("feature_loss") == "mse" ? FeatureLoss::mse : FeatureLoss::bce;
  c.enc_hidden = j.at("enc_hidden").get<std::vector<int>>();
  c.gen_hidden = j.at("gen_hidden").get<std::vector<int>>();
  c.dz_hidden = j.at("dz_hidden").get<std::vector<int>>();
  c.dx_hidden = j.at("dx_hidden").get<std::vector<int>>();
  c.exact_threshold = j.at("exact_threshold");
  c.checkpoint_every = j.at("checkpoint_every");
  return c;
}

void write_manifest(const fs::path& out, const TrainConfig& cfg,
                    const DatasetArgs& ds, const std::string& command) {
  json m{{"version", kVersion},
         {"command", command},
         {"created_at",
          std::chrono::duration_cast<std::chrono::seconds>(
              std::chrono::system_clock::now().time_since_epoch())
              .count()},
         {"dataset",
          {{"edges", ds.edges},
           {"features", ds.features},
           {"labels", ds.labels},
           {"train_ratio", ds.train_ratio},
           {"val_ratio", ds.val_ratio},
           {"test_ratio", ds.test_ratio}}},
         {"config", config_to_json(cfg)}};
  std::ofstream f(out / "manifest.json");
  f << m.dump(2) << '\n';
}

void write_embeddings_csv(const fs::path& path, const Matrix& h,
                          const std::vector<int>* labels) {
  std::ofstream f(path);
  f.precision(12);
  for (Eigen::Index i = 0; i < h.rows(); ++i) {
    for (Eigen::Index j = 0; j < h.cols(); ++j) {
      if (j) f << ',';
      f << h(i, j);
    }
    if (labels) f << ',' << (*labels)[static_cast<std::size_t>(i)];
    f << '\n';
  }
}

double mean_of(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / v.size();
}

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double m = mean_of(v), s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / (v.size() - 1));
}

struct LoadedRun {
  Graph graph;
  DatasetArgs ds;
  TrainConfig cfg;
  EdgeSplit split;
  Matrix features;  // normalized as in training
  NormalizedAdjacency adj_train;
};

//! Rebuild graph, split and training adjacency from a run's manifest.
LoadedRun load_run(const fs::path& out) {
  std::ifstream mf(out / "manifest.json");
  if (!mf) throw IoError("missing manifest.json in " + out.string());
  json m = json::parse(mf);
  LoadedRun run;
  run.ds.edges = m["dataset"]["edges"];
  run.ds.features = m["dataset"]["features"];
  run.ds.labels = m["dataset"]["labels"];
  run.ds.train_ratio = m["dataset"]["train_ratio"];
  run.ds.val_ratio = m["dataset"]["val_ratio"];
  run.ds.test_ratio = m["dataset"]["test_ratio"];
  run.cfg = config_from_json(m["config"]);
  run.graph = load_dataset(run.ds);
  run.split = split_edges(run.graph, run.ds.train_ratio, run.ds.val_ratio,
                          run.ds.test_ratio, run.cfg.seed);
  run.features = run.cfg.feature_loss == FeatureLoss::bce
                     ? dbgan::detail::normalize_features_01(run.graph.features)
                     : run.graph.features;
  run.adj_train =
      normalize_adjacency(run.graph.n, run.split.train_pos, /*self_loops=*/true);
  return run;
}

int run_train(const DatasetArgs& ds, TrainConfig cfg, const fs::path& out) {
  Graph g;
  try {
    g = load_dataset(ds);
  } catch (const IoError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  }
  fs::create_directories(out / "checkpoints");
  write_manifest(out, cfg, ds, "train");
  EdgeSplit split =
      split_edges(g, ds.train_ratio, ds.val_ratio, ds.test_ratio, cfg.seed);

  try {
    int every = cfg.checkpoint_every;
    fs::path ckdir = out / "checkpoints";
    auto result = train(g, split, cfg,
                        [&](const EpochRecord& rec, ModelParams& p) {
                          if (every > 0 && (rec.epoch + 1) % every == 0)
                            save_checkpoint(
                                (ckdir / ("epoch_" + std::to_string(rec.epoch + 1) +
                                          ".ckpt")).string(),
                                p);
                        });
    write_history_csv((out / "history.csv").string(), result.history);
    save_checkpoint((ckdir / "final.ckpt").string(), result.params);
    save_checkpoint((ckdir / "best.ckpt").string(), result.best_params);
    std::cerr << "trained " << cfg.epochs << " epochs; best val AUC "
              << result.history.epochs[result.best_epoch].val_auc << " at epoch "
              << result.best_epoch << '\n';
  } catch (const TrainingDiverged& e) {
    write_history_csv((out / "history.csv").string(), e.history);
    std::cerr << "divergence: " << e.what() << '\n';
    return kExitDiverged;
  }
  return 0;
}

int run_eval(const fs::path& out, const std::string& task, int runs,
             std::uint64_t seed_base) {
  fs::path ck = out / "checkpoints" / "best.ckpt";
  if (!fs::exists(ck)) {
    std::cerr << "data error: missing checkpoint " << ck << '\n';
    return kExitData;
  }
  LoadedRun run = load_run(out);
  ModelParams params = load_checkpoint(ck.string());
  Matrix h = encode_embeddings(params, run.features, run.adj_train);

  json result{{"seed_count", runs}};
  if (task == "lp" || task == "both") {
    std::vector<double> aucs, aps;
    for (int r = 0; r < runs; ++r) {
      auto lp = link_prediction(h, run.split, /*use_test=*/true);
      aucs.push_back(lp.auc);
      aps.push_back(lp.ap);
    }
    result["auc"] = mean_of(aucs);
    result["auc_std"] = std_of(aucs);
    result["ap"] = mean_of(aps);
    result["ap_std"] = std_of(aps);
  }
  if (task == "cluster" || task == "both") {
    if (!run.graph.labels) {
      std::cerr << "data error: clustering requested but dataset has no labels\n";
      return kExitData;
    }
    int k = run.graph.num_classes();
    std::vector<double> accs, nmis, aris;
    for (int r = 0; r < runs; ++r) {
      auto cl = node_clustering(h, *run.graph.labels, k, seed_base + r);
      accs.push_back(cl.acc);
      nmis.push_back(cl.nmi);
      aris.push_back(cl.ari);
    }
    result["acc"] = mean_of(accs);
    result["acc_std"] = std_of(accs);
    result["nmi"] = mean_of(nmis);
    result["nmi_std"] = std_of(nmis);
    result["ari"] = mean_of(aris);
    result["ari_std"] = std_of(aris);
  }
  std::ofstream mf(out / "metrics.json");
  mf << result.dump(2) << '\n';
  std::cout << result.dump(2) << '\n';
  return 0;
}

int run_sweep(const DatasetArgs& ds, TrainConfig base, const fs::path& out,
              std::vector<int> qs, int seeds_per_q) {
  {
    auto sorted = qs;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      std::cerr << "config error: duplicate q values in sweep\n";
      return kExitConfig;
    }
  }
  Graph g;
  try {
    g = load_dataset(ds);
  } catch (const IoError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  }
  fs::create_directories(out);
  std::ofstream csv(out / "sweep.csv");
  csv << "q,auc_mean,auc_std,ap_mean,ap_std\n";
  csv.precision(8);
  for (int q : qs) {
    TrainConfig cfg = base;
    cfg.q = q;
    std::vector<double> aucs, aps;
    for (int s = 0; s < seeds_per_q; ++s) {
      cfg.seed = base.seed + static_cast<std::uint64_t>(s);
      EdgeSplit split =
          split_edges(g, ds.train_ratio, ds.val_ratio, ds.test_ratio, cfg.seed);
      auto result = train(g, split, cfg);
      auto adj = normalize_adjacency(g.n, split.train_pos, true);
      Matrix x = cfg.feature_loss == FeatureLoss::bce
                     ? dbgan::detail::normalize_features_01(g.features)
                     : g.features;
      Matrix h = encode_embeddings(result.best_params, x, adj);
      auto lp = link_prediction(h, split, true);
      aucs.push_back(lp.auc);
      aps.push_back(lp.ap);
      std::cerr << "q=" << q << " seed=" << cfg.seed << " auc=" << lp.auc
                << " ap=" << lp.ap << '\n';
    }
    csv << q << ',' << mean_of(aucs) << ',' << std_of(aucs) << ','
        << mean_of(aps) << ',' << std_of(aps) << '\n';
  }
  return 0;
}

int run_export(const fs::path& out, bool with_labels) {
  fs::path ck = out / "checkpoints" / "best.ckpt";
  if (!fs::exists(ck)) {
    std::cerr << "data error: missing checkpoint " << ck << '\n';
    return kExitData;
  }
  LoadedRun run = load_run(out);
  if (with_labels && !run.graph.labels) {
    std::cerr << "data error: --labels requested but dataset has no labels\n";
    return kExitData;
  }
  ModelParams params = load_checkpoint(ck.string());
  Matrix h = encode_embeddings(params, run.features, run.adj_train);
  write_embeddings_csv(out / "embeddings.csv", h,
                       with_labels ? &*run.graph.labels : nullptr);
  std::cerr << "wrote " << (out / "embeddings.csv") << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DBGAN graph representation learner"};
  app.require_subcommand(1);

  DatasetArgs ds;
  TrainConfig cfg;
  std::string config_path, out_dir = "run";
  std::string feature_loss = "bce";
  std::string q_list = "8,16,32,64,128,256,512,1024";
  std::string task = "both";
  int runs = 20, threads = 0, sweep_seeds = 3;
  bool no_pde = false, no_bal = false, no_bal_strict = false, with_labels = false;

  auto add_dataset_flags = [&](CLI::App* c) {
    c->add_option("--edges", ds.edges, "edge list file");
    c->add_option("--features", ds.features, "feature CSV file");
    c->add_option("--labels", ds.labels, "label file (optional)");
    c->add_option("--train-ratio", ds.train_ratio);
    c->add_option("--val-ratio", ds.val_ratio);
    c->add_option("--test-ratio", ds.test_ratio);
  };
  auto add_train_flags = [&](CLI::App* c) {
    c->add_option("--config", config_path, "flat key=value config file");
    c->add_option("--seed", cfg.seed);
    c->add_option("--q", cfg.q, "latent dimension");
    c->add_option("--m", cfg.m, "prototype count");
    c->add_option("--alpha", cfg.alpha);
    c->add_option("--lambda", cfg.lambda_gp);
    c->add_option("--lr", cfg.lr);
    c->add_option("--epochs", cfg.epochs);
    c->add_option("--critic-steps", cfg.critic_steps);
    c->add_flag("--no-pde", no_pde, "N(0,1) prior ablation");
    c->add_flag("--no-bal", no_bal, "reconstruction-only ablation");
    c->add_flag("--no-bal-strict-gae", no_bal_strict,
                "adjacency-only reconstruction (GAE-equivalent)");
    c->add_option("--feature-loss", feature_loss)
        ->check(CLI::IsMember({"bce", "mse"}));
    c->add_option("--checkpoint-every", cfg.checkpoint_every);
  };

  auto* ctrain = app.add_subcommand("train", "train a model");
  add_dataset_flags(ctrain);
  add_train_flags(ctrain);
  ctrain->add_option("--out", out_dir, "output directory");
  ctrain->add_option("--threads", threads);

  auto* ceval = app.add_subcommand("eval", "evaluate a trained run");
  ceval->add_option("--out", out_dir, "run directory with checkpoints");
  ceval->add_option("--task", task)->check(CLI::IsMember({"lp", "cluster", "both"}));
  ceval->add_option("--runs", runs);
  ceval->add_option("--seed", cfg.seed);
  ceval->add_option("--threads", threads);

  auto* csweep = app.add_subcommand("sweep-dim", "latent-dimension sweep");
  add_dataset_flags(csweep);
  add_train_flags(csweep);
  csweep->add_option("--out", out_dir);
  csweep->add_option("--q-list", q_list, "comma-separated latent dims");
  csweep->add_option("--runs", sweep_seeds, "seeds per dimension");
  csweep->add_option("--threads", threads);

  auto* cexport = app.add_subcommand("export", "export embeddings as CSV");
  cexport->add_option("--out", out_dir, "run directory with checkpoints");
  cexport->add_flag("--with-labels", with_labels, "append label column");
  cexport->add_option("--threads", threads);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // help/version exit cleanly; every other parse failure is a config error
    return app.exit(e) == 0 ? 0 : kExitConfig;
  }
  set_threads(threads);

  try {
    if (!config_path.empty()) {
      auto rest = apply_config(cfg, parse_config_file(config_path));
      for (const auto& [k, v] : rest) {
        if (k == "edges") ds.edges = v;
        else if (k == "features") ds.features = v;
        else if (k == "labels") ds.labels = v;
        else if (k == "out") out_dir = v;
        else {
          std::cerr << "config error: unknown key '" << k << "'\n";
          return kExitConfig;
        }
      }
    }
    // flags win over the config file for these (re-parse is cheap)
    if (no_pde) cfg.use_pde = false;
    if (no_bal || no_bal_strict) cfg.use_bal = false;
    if (no_bal_strict) cfg.strict_gae = true;
    cfg.feature_loss = feature_loss == "mse" ? FeatureLoss::mse : FeatureLoss::bce;

    if (ctrain->parsed() || csweep->parsed()) {
      if (ds.edges.empty() || ds.features.empty()) {
        std::cerr << "config error: --edges and --features are required\n";
        return kExitConfig;
      }
      try {
        cfg.validate();
      } catch (const std::exception& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return kExitConfig;
      }
    }

    if (ctrain->parsed()) return run_train(ds, cfg, out_dir);
    if (ceval->parsed()) return run_eval(out_dir, task, runs, cfg.seed);
    if (csweep->parsed())
      return run_sweep(ds, cfg, out_dir, parse_int_list(q_list), sweep_seeds);
    if (cexport->parsed()) return run_export(out_dir, with_labels);
  } catch (const IoError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfig;
  }
  return 0;
}
