#include "cli.hpp"

#include "osrm/adapters.hpp"
#include "osrm/error.hpp"
#include "osrm/harness.hpp"
#include "osrm/linalg.hpp"
#include "osrm/mergers.hpp"
#include "osrm/subspace.hpp"
#include "osrm/tensor_io.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>

namespace osrm::cli {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

const std::vector<std::string> kMethods{"ta", "ties", "fisher", "regmean", "emr"};

void emit(std::ostream& out, const json& j) {
  out << j.dump(2) << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f << text;
  if (!f) throw IoError("failed writing '" + path.string() + "'");
}

std::map<std::string, Eigen::Index> out_dims_from_widths(const LayerMap& a) {
  std::map<std::string, Eigen::Index> dims;
  for (const auto& [layer, m] : a) dims[layer] = m.cols();
  return dims;
}

// ---------------------------------------------------------------------------
struct GenTasksArgs {
  harness::TaskSpec spec;
  std::string out_dir;
};

void gen_tasks(const GenTasksArgs& a, std::ostream& out) {
  const LayerMap base = harness::make_base_model(a.spec.width, a.spec.layers, a.spec.seed);
  const auto tasks = harness::make_tasks(base, a.spec);
  std::error_code ec;
  fs::create_directories(a.out_dir, ec);
  if (ec) throw IoError("cannot create '" + a.out_dir + "': " + ec.message());
  json files = json::object();
  const fs::path base_path = fs::path(a.out_dir) / "base.ck";
  io::write_checkpoint(io::weights_checkpoint(base, io::Role::base,
                                              {{"seed", std::to_string(a.spec.seed)}}),
                       base_path);
  files["base"] = base_path.string();
  for (const auto& t : tasks) {
    const fs::path p = fs::path(a.out_dir) / (t.name + ".ck");
    io::write_checkpoint(harness::to_checkpoint(t), p);
    files[t.name] = p.string();
  }
  emit(out, {{"files", files}});
}

// ---------------------------------------------------------------------------
struct CollectArgs {
  std::string task, model, adapter, out, mode = "averaged";
  int k = 100;
  std::uint64_t seed = 0;
};

void collect_features(const CollectArgs& a, std::ostream& out) {
  const auto task = harness::task_from_checkpoint(io::read_checkpoint(a.task));
  const LayerMap model = io::weights_of(io::read_checkpoint(a.model));
  std::optional<adapters::LoraAdapter> adapter;
  if (!a.adapter.empty()) adapter = adapters::adapter_from_checkpoint(io::read_checkpoint(a.adapter));
  auto bank = harness::collect_features(task, model, a.k, a.seed, adapter ? &*adapter : nullptr);
  if (subspace::mode_from_string(a.mode) == subspace::FeatureMode::averaged) {
    bank = subspace::average_features(bank);
  }
  io::write_checkpoint(subspace::to_checkpoint(bank), a.out);
  emit(out, {{"task", bank.task}, {"k", bank.k}, {"mode", a.mode}, {"out", a.out}});
}

// ---------------------------------------------------------------------------
struct InitArgs {
  int r = 8;
  double alpha = 16.0;
  std::string exclude_task, base, out;
  std::vector<std::string> features;
};

void init_subspace(const InitArgs& a, std::ostream& out) {
  std::vector<subspace::FeatureBank> banks;
  for (const auto& f : a.features) banks.push_back(subspace::bank_from_checkpoint(io::read_checkpoint(f)));
  const auto init = subspace::osrm_init_layers(banks, a.exclude_task, a.r);

  std::map<std::string, Eigen::Index> dims = out_dims_from_widths(init.a_tilde);
  if (!a.base.empty()) {
    for (const auto& [layer, w] : io::weights_of(io::read_checkpoint(a.base))) dims[layer] = w.rows();
  }
  const auto adapter = adapters::zero_b_adapter(a.exclude_task, init.a_tilde, dims, a.alpha);
  std::map<std::string, std::string> meta{{"init", "osrm"}};
  json objective = json::object();
  for (const auto& [layer, v] : init.objective) {
    meta["objective." + layer] = adapters::format_real(v);
    objective[layer] = v;
  }
  io::write_checkpoint(adapters::to_checkpoint(adapter, meta), a.out);
  emit(out, {{"task", a.exclude_task}, {"r", a.r}, {"objective", objective}, {"out", a.out}});
}

// ---------------------------------------------------------------------------
struct TrainArgs {
  std::string task, base, init, out;
  bool gaussian = false;
  int r = 8;
  double alpha = 16.0;
  harness::TrainConfig cfg;
};

void train(const TrainArgs& a, std::ostream& out) {
  const auto task = harness::task_from_checkpoint(io::read_checkpoint(a.task));
  const LayerMap base = io::weights_of(io::read_checkpoint(a.base));
  adapters::LoraAdapter init;
  if (a.gaussian) {
    init = harness::gaussian_init(task.name, base, a.r, a.alpha, a.cfg.seed);
  } else if (!a.init.empty()) {
    init = adapters::adapter_from_checkpoint(io::read_checkpoint(a.init));
  } else {
    throw ValidationError("train: pass --init <adapter> or --gaussian-init");
  }
  init.task = task.name;
  const auto res = harness::finetune(task, base, init, a.cfg);
  io::write_checkpoint(adapters::to_checkpoint(res.adapter,
                                               {{"initial_loss", adapters::format_real(res.initial_loss)},
                                                {"final_loss", adapters::format_real(res.final_loss)},
                                                {"seed", std::to_string(a.cfg.seed)}}),
                       a.out);
  emit(out, {{"task", task.name},
             {"initial_loss", res.initial_loss},
             {"final_loss", res.final_loss},
             {"out", a.out}});
}

// ---------------------------------------------------------------------------
struct MergeArgs {
  std::string method, base, out;
  std::optional<double> lambda;
  double keep_fraction = 0.2, gamma = 0.9;
  std::vector<std::string> deltas, models, fishers, grams;
  std::optional<std::uint64_t> seed;
};

LayerMap gram_from_checkpoint(const io::Checkpoint& c) {
  if (c.role == io::Role::features) return mergers::compute_gram(subspace::bank_from_checkpoint(c));
  LayerMap g;
  for (const auto& layer : io::layers_with_suffix(c, "G")) g[layer] = c.matrix(layer + ".G");
  if (g.empty()) throw ValidationError("gram checkpoint has neither features nor '<layer>.G' tensors");
  return g;
}

void merge(const MergeArgs& a, std::ostream& out) {
  mergers::MergeConfig cfg = mergers::default_config(mergers::method_from_string(a.method));
  if (a.lambda) cfg.lambda = *a.lambda;
  cfg.keep_fraction = a.keep_fraction;
  cfg.gamma = a.gamma;
  mergers::validate(cfg);

  const LayerMap base = io::weights_of(io::read_checkpoint(a.base));
  std::vector<adapters::TaskVector> deltas;
  for (const auto& p : a.deltas) deltas.push_back(adapters::delta_from_checkpoint(io::read_checkpoint(p)));
  std::vector<LayerMap> models;
  for (const auto& p : a.models) models.push_back(io::weights_of(io::read_checkpoint(p)));

  // Methods on task vectors accept full models; methods on full weights
  // accept task vectors. Both are converted against the base.
  auto all_deltas = [&] {
    auto d = deltas;
    for (std::size_t i = 0; i < models.size(); ++i) {
      d.push_back(mergers::delta_between(base, models[i], "M" + std::to_string(i + 1)));
    }
    return d;
  };
  auto all_models = [&] {
    auto m = models;
    for (const auto& d : deltas) {
      LayerMap w = base;
      for (auto& [layer, wl] : w) {
        auto it = d.delta.find(layer);
        if (it == d.delta.end()) throw ValidationError("delta '" + d.task + "' lacks layer '" + layer + "'");
        if (it->second.rows() != wl.rows() || it->second.cols() != wl.cols()) {
          throw ValidationError("delta '" + d.task + "': shape mismatch on layer '" + layer + "'");
        }
        wl += it->second;
      }
      m.push_back(std::move(w));
    }
    return m;
  };

  io::Checkpoint result;
  switch (cfg.method) {
    case mergers::Method::ta:
      result = mergers::merged_checkpoint(mergers::merge_ta(base, all_deltas(), cfg.lambda), cfg);
      break;
    case mergers::Method::ties:
      result = mergers::merged_checkpoint(
          mergers::merge_ties(base, all_deltas(), cfg.lambda, cfg.keep_fraction), cfg);
      break;
    case mergers::Method::fisher: {
      std::vector<LayerMap> fishers;
      for (const auto& p : a.fishers) fishers.push_back(io::weights_of(io::read_checkpoint(p)));
      result = mergers::merged_checkpoint(
          mergers::merge_fisher(base, all_models(), fishers, cfg.fisher_floor), cfg);
      result.metadata["fisher_weights"] = fishers.empty() ? "uniform" : "empirical";
      break;
    }
    case mergers::Method::regmean: {
      std::vector<LayerMap> grams;
      for (const auto& p : a.grams) grams.push_back(gram_from_checkpoint(io::read_checkpoint(p)));
      result = mergers::merged_checkpoint(
          mergers::merge_regmean(base, all_models(), grams, cfg.gamma), cfg);
      break;
    }
    case mergers::Method::emr:
      result = mergers::to_checkpoint(mergers::merge_emr(base, all_deltas()));
      break;
  }
  if (a.seed) result.metadata["seed"] = std::to_string(*a.seed);
  io::write_checkpoint(result, a.out);
  emit(out, {{"method", a.method}, {"metadata", result.metadata}, {"out", a.out}});
}

// ---------------------------------------------------------------------------
struct EvalArgs {
  std::string task, model, adapter, base, emr_task;
  int samples = 1000;
};

void eval(const EvalArgs& a, std::ostream& out) {
  const auto task = harness::task_from_checkpoint(io::read_checkpoint(a.task));
  const io::Checkpoint model_ckpt = io::read_checkpoint(a.model);
  LayerMap weights;
  if (model_ckpt.meta("method") == "emr") {
    if (a.base.empty()) throw ValidationError("eval: an EMR bundle needs --base");
    const auto bundle = mergers::emr_from_checkpoint(model_ckpt);
    const std::string& name = a.emr_task.empty() ? task.name : a.emr_task;
    const auto it = std::find(bundle.tasks.begin(), bundle.tasks.end(), name);
    if (it == bundle.tasks.end()) throw ValidationError("eval: EMR bundle has no task '" + name + "'");
    weights = mergers::emr_task_weights(io::weights_of(io::read_checkpoint(a.base)), bundle,
                                        static_cast<std::size_t>(it - bundle.tasks.begin()));
  } else {
    weights = io::weights_of(model_ckpt);
  }
  std::optional<adapters::LoraAdapter> adapter;
  if (!a.adapter.empty()) adapter = adapters::adapter_from_checkpoint(io::read_checkpoint(a.adapter));
  const double loss = harness::task_loss(task, weights, adapter ? &*adapter : nullptr, a.samples);
  emit(out, {{"task", task.name}, {"loss", loss}, {"samples", a.samples}});
}

// ---------------------------------------------------------------------------
struct ProcrustesArgs {
  std::string init, ft;
};

void procrustes(const ProcrustesArgs& a, std::ostream& out) {
  const auto init = adapters::adapter_from_checkpoint(io::read_checkpoint(a.init));
  const auto ft = adapters::adapter_from_checkpoint(io::read_checkpoint(a.ft));
  json layers = json::object();
  for (const auto& [name, l0] : init.layers) {
    auto it = ft.layers.find(name);
    if (it == ft.layers.end()) throw ValidationError("procrustes: layer '" + name + "' missing");
    const auto d = linalg::procrustes_distance(it->second.a, l0.a);
    layers[name] = {{"distance", d.distance}, {"normalized", d.normalized}};
  }
  if (ft.layers.size() != init.layers.size()) throw ValidationError("procrustes: layer sets differ");
  emit(out, {{"layers", layers}});
}

// ---------------------------------------------------------------------------
struct PosthocArgs {
  std::string delta, subspace, out;
};

void posthoc(const PosthocArgs& a, std::ostream& out) {
  const auto delta = adapters::delta_from_checkpoint(io::read_checkpoint(a.delta));
  const io::Checkpoint sub = io::read_checkpoint(a.subspace);
  LayerMap a_tilde;
  for (const auto& layer : io::layers_with_suffix(sub, "A")) a_tilde[layer] = sub.matrix(layer + ".A");
  const auto res = adapters::posthoc_decompose(delta, a_tilde);
  std::map<std::string, std::string> meta{{"init", "posthoc"}};
  for (const auto& [layer, v] : res.residual) meta["residual." + layer] = adapters::format_real(v);
  io::write_checkpoint(adapters::to_checkpoint(res.adapter, meta), a.out);
  emit(out, {{"task", delta.task}, {"relative_residual", res.residual}, {"out", a.out}});
}

// ---------------------------------------------------------------------------
struct ReportArgs {
  harness::PipelineConfig cfg = harness::default_study();
  std::vector<std::string> methods{kMethods};
  std::string init = "osrm", mode = "averaged", interference_mode = "averaged";
  std::string out, csv;
};

void report(ReportArgs a, std::ostream& out) {
  a.cfg.methods.clear();
  for (const auto& m : a.methods) a.cfg.methods.push_back(mergers::method_from_string(m));
  a.cfg.osrm = a.init == "osrm";
  a.cfg.init_mode = subspace::mode_from_string(a.mode);
  a.cfg.interference_mode = subspace::mode_from_string(a.interference_mode);
  const auto rep = harness::run_pipeline(a.cfg);
  const std::string text = harness::report_json(rep);
  if (!a.csv.empty()) write_text(a.csv, harness::report_csv(rep));
  if (a.out.empty()) {
    out << text;
  } else {
    write_text(a.out, text);
    emit(out, {{"out", a.out}, {"runs", rep.runs.size()}});
  }
}

// ---------------------------------------------------------------------------
struct RankArgs {
  std::string task, model;
  std::vector<int> ks{2, 8, 16, 64};
  std::uint64_t seed = 0;
};

void rank_table(const RankArgs& a, std::ostream& out) {
  const auto task = harness::task_from_checkpoint(io::read_checkpoint(a.task));
  const LayerMap model = io::weights_of(io::read_checkpoint(a.model));
  json rows = json::array();
  for (const auto& [k, rank] : harness::rank_table(task, model, a.ks, a.seed)) {
    rows.push_back({{"k", k}, {"rank", rank}});
  }
  emit(out, {{"task", task.name}, {"rank_table", rows}});
}

void add_train_flags(CLI::App* sc, harness::TrainConfig& cfg) {
  sc->add_option("--steps", cfg.steps)->capture_default_str();
  sc->add_option("--batch", cfg.batch)->capture_default_str();
  sc->add_option("--lr", cfg.lr)->capture_default_str();
  sc->add_option("--momentum", cfg.momentum)->capture_default_str();
  sc->add_option("--eval-samples", cfg.eval_samples)->capture_default_str();
  sc->add_flag("--freeze-a", cfg.freeze_A, "Keep A at its initialization");
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Orthogonal-subspace LoRA initialization and model merging toolkit", "osrm"};
  app.require_subcommand(1);

  std::function<void()> action;

  GenTasksArgs gen;
  auto* sc = app.add_subcommand("gen-tasks", "Generate a base model and synthetic tasks");
  sc->add_option("--num-tasks", gen.spec.num_tasks)->capture_default_str();
  sc->add_option("--width", gen.spec.width)->capture_default_str();
  sc->add_option("--subspace-dim", gen.spec.subspace_dim)->capture_default_str();
  sc->add_option("--sigma", gen.spec.sigma)->capture_default_str();
  sc->add_option("--layers", gen.spec.layers)->capture_default_str();
  sc->add_option("--mean-shift", gen.spec.mean_shift)->capture_default_str();
  sc->add_option("--teacher-scale", gen.spec.teacher_scale)->capture_default_str();
  sc->add_option("--seed", gen.spec.seed)->capture_default_str();
  sc->add_option("--out-dir", gen.out_dir)->required();
  sc->callback([&] { action = [&] { gen_tasks(gen, out); }; });

  CollectArgs col;
  sc = app.add_subcommand("collect-features", "Capture per-layer input features of a task");
  sc->add_option("--task", col.task)->required();
  sc->add_option("--model", col.model)->required();
  sc->add_option("--adapter", col.adapter);
  sc->add_option("--k", col.k)->capture_default_str();
  sc->add_option("--seed", col.seed)->capture_default_str();
  sc->add_option("--mode", col.mode)->check(CLI::IsMember({"full", "averaged"}))->capture_default_str();
  sc->add_option("--out", col.out)->required();
  sc->callback([&] { action = [&] { collect_features(col, out); }; });

  InitArgs ini;
  sc = app.add_subcommand("init-subspace", "Compute the orthogonal-subspace A for one task");
  sc->add_option("--r", ini.r)->capture_default_str();
  sc->add_option("--alpha", ini.alpha)->capture_default_str();
  sc->add_option("--exclude-task", ini.exclude_task)->required();
  sc->add_option("--features", ini.features)->required();
  sc->add_option("--base", ini.base, "Sizes B from the base model (default: square layers)");
  sc->add_option("--out", ini.out)->required();
  sc->callback([&] { action = [&] { init_subspace(ini, out); }; });

  TrainArgs tr;
  sc = app.add_subcommand("train", "Fine-tune a LoRA adapter on a synthetic task");
  sc->add_option("--task", tr.task)->required();
  sc->add_option("--base", tr.base)->required();
  sc->add_option("--init", tr.init, "Initial adapter (e.g. from init-subspace)");
  sc->add_flag("--gaussian-init", tr.gaussian, "Gaussian A, zero B");
  sc->add_option("--r", tr.r)->capture_default_str();
  sc->add_option("--alpha", tr.alpha)->capture_default_str();
  sc->add_option("--seed", tr.cfg.seed)->capture_default_str();
  add_train_flags(sc, tr.cfg);
  sc->add_option("--out", tr.out)->required();
  sc->callback([&] { action = [&] { train(tr, out); }; });

  MergeArgs mg;
  sc = app.add_subcommand("merge", "Merge task vectors or models");
  sc->add_option("--method", mg.method)->required()->check(CLI::IsMember(kMethods));
  sc->add_option("--lambda", mg.lambda, "Scaling (default 0.3 for ta, 1 for ties)");
  sc->add_option("--keep-fraction", mg.keep_fraction)->capture_default_str();
  sc->add_option("--gamma", mg.gamma)->capture_default_str();
  sc->add_option("--base", mg.base)->required();
  sc->add_option("--delta", mg.deltas, "Adapter or task-vector checkpoint (repeatable)");
  sc->add_option("--model", mg.models, "Full model checkpoint (repeatable)");
  sc->add_option("--fisher", mg.fishers, "Per-entry Fisher weights, one per model (repeatable)");
  sc->add_option("--gram", mg.grams, "Features or Gram checkpoint, one per model (repeatable)");
  sc->add_option("--out", mg.out)->required();
  sc->add_option("--seed", mg.seed);
  sc->callback([&] { action = [&] { merge(mg, out); }; });

  EvalArgs ev;
  sc = app.add_subcommand("eval", "Loss of a model on a task's evaluation set");
  sc->add_option("--task", ev.task)->required();
  sc->add_option("--model", ev.model)->required();
  sc->add_option("--adapter", ev.adapter);
  sc->add_option("--base", ev.base, "Base model (required for EMR bundles)");
  sc->add_option("--emr-task", ev.emr_task, "EMR task to evaluate (default: the task's name)");
  sc->add_option("--samples", ev.samples)->capture_default_str();
  sc->callback([&] { action = [&] { eval(ev, out); }; });

  ProcrustesArgs pr;
  sc = app.add_subcommand("procrustes", "Change of A between two adapters");
  sc->add_option("--init", pr.init)->required();
  sc->add_option("--ft", pr.ft)->required();
  sc->callback([&] { action = [&] { procrustes(pr, out); }; });

  PosthocArgs ph;
  sc = app.add_subcommand("posthoc", "Project an existing delta onto an orthonormal A");
  sc->add_option("--delta", ph.delta)->required();
  sc->add_option("--subspace", ph.subspace, "Adapter whose A rows are the target basis")->required();
  sc->add_option("--out", ph.out)->required();
  sc->callback([&] { action = [&] { posthoc(ph, out); }; });

  ReportArgs rp;
  std::vector<std::uint64_t> seeds = rp.cfg.seeds;
  sc = app.add_subcommand("report", "Run the synthetic end-to-end study");
  sc->add_option("--num-tasks", rp.cfg.tasks.num_tasks)->capture_default_str();
  sc->add_option("--width", rp.cfg.tasks.width)->capture_default_str();
  sc->add_option("--subspace-dim", rp.cfg.tasks.subspace_dim)->capture_default_str();
  sc->add_option("--sigma", rp.cfg.tasks.sigma)->capture_default_str();
  sc->add_option("--layers", rp.cfg.tasks.layers)->capture_default_str();
  sc->add_option("--mean-shift", rp.cfg.tasks.mean_shift)->capture_default_str();
  sc->add_option("--teacher-scale", rp.cfg.tasks.teacher_scale)->capture_default_str();
  sc->add_option("--k", rp.cfg.k)->capture_default_str();
  sc->add_option("--r", rp.cfg.r)->capture_default_str();
  sc->add_option("--alpha", rp.cfg.alpha)->capture_default_str();
  sc->add_option("--methods", rp.methods)->delimiter(',')->check(CLI::IsMember(kMethods));
  sc->add_option("--seeds", seeds)->delimiter(',');
  sc->add_option("--init", rp.init)->check(CLI::IsMember({"osrm", "gaussian"}))->capture_default_str();
  sc->add_option("--mode", rp.mode)->check(CLI::IsMember({"full", "averaged"}))->capture_default_str();
  sc->add_option("--interference-mode", rp.interference_mode)
      ->check(CLI::IsMember({"full", "averaged"}))
      ->capture_default_str();
  sc->add_option("--fisher-samples", rp.cfg.fisher_samples)->capture_default_str();
  add_train_flags(sc, rp.cfg.train);
  sc->add_option("--out", rp.out, "JSON report path (default: stdout)");
  sc->add_option("--csv", rp.csv, "Optional CSV of per-task losses");
  sc->callback([&] {
    rp.cfg.seeds = seeds;
    action = [&] { report(rp, out); };
  });

  RankArgs rk;
  sc = app.add_subcommand("rank-table", "Rank of the first-layer feature matrix versus k");
  sc->add_option("--task", rk.task)->required();
  sc->add_option("--model", rk.model)->required();
  sc->add_option("--ks", rk.ks)->delimiter(',');
  sc->add_option("--seed", rk.seed)->capture_default_str();
  sc->callback([&] { action = [&] { rank_table(rk, out); }; });

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (action) action();
    return 0;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::invalid_argument& e) {
    err << "error: invalid number: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace osrm::cli
