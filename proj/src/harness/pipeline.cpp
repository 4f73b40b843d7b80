#include "osrm/error.hpp"
#include "osrm/harness.hpp"

#include <json.hpp>

#include <exception>
#include <sstream>

namespace osrm::harness {

using nlohmann::json;

namespace {

double excluded_objective(const LoraAdapter& adapter, const LayerMap& excluded) {
  double total = 0.0;
  for (const auto& [name, h] : excluded) {
    total += (adapter.layers.at(name).a * h.transpose()).squaredNorm();
  }
  return total;
}

SeedReport run_seed(const PipelineConfig& cfg, std::uint64_t seed) {
  using mergers::Method;
  SeedReport rep;
  rep.seed = seed;

  TaskSpec spec = cfg.tasks;
  spec.seed = seed;
  const LayerMap base = make_base_model(spec.width, spec.layers, seed);
  const std::vector<SyntheticTask> tasks = make_tasks(base, spec);

  std::vector<subspace::FeatureBank> full, averaged;
  for (const auto& t : tasks) {
    full.push_back(collect_features(t, base, cfg.k, derive_seed(seed, "features:" + t.name)));
    averaged.push_back(subspace::average_features(full.back()));
  }
  const auto& init_banks = cfg.init_mode == subspace::FeatureMode::full ? full : averaged;
  const auto& probe_banks = cfg.interference_mode == subspace::FeatureMode::full ? full : averaged;

  TrainConfig train = cfg.train;
  train.seed = derive_seed(seed, "train");
  std::vector<LoraAdapter> tuned;
  std::vector<adapters::TaskVector> deltas;
  for (const auto& t : tasks) {
    LoraAdapter init;
    if (cfg.osrm) {
      const auto sub = subspace::osrm_init_layers(init_banks, t.name, cfg.r);
      std::map<std::string, Eigen::Index> out_dims;
      for (const auto& [name, w] : base) out_dims[name] = w.rows();
      init = adapters::zero_b_adapter(t.name, sub.a_tilde, out_dims, cfg.alpha);
    } else {
      init = gaussian_init(t.name, base, cfg.r, cfg.alpha, seed);
    }
    rep.init_objective[t.name] =
        excluded_objective(init, subspace::build_excluded_features(init_banks, t.name));
    rep.base_loss[t.name] = task_loss(t, base, nullptr, train.eval_samples);

    TrainResult res = finetune(t, base, init, train);
    rep.initial_loss[t.name] = res.initial_loss;
    rep.single_task_loss[t.name] = res.final_loss;
    rep.change_of_A[t.name] = change_of_A_report(init, res.adapter);
    deltas.push_back(adapters::lora_delta(res.adapter));
    tuned.push_back(std::move(res.adapter));
  }

  for (std::size_t s = 0; s < tasks.size(); ++s) {
    const LoraAdapter& a = tuned[s];
    for (std::size_t t = 0; t < tasks.size(); ++t) {
      if (s == t) continue;
      double norm = 0.0;
      for (const auto& [name, l] : a.layers) {
        norm += subspace::interference_norm(l.b, l.a, probe_banks[t].layers.at(name), a.scale());
      }
      rep.interference[tasks[s].name + "->" + tasks[t].name] = norm;
      rep.total_interference += norm;
    }
  }

  for (Method m : cfg.methods) {
    const mergers::MergeConfig mc = mergers::default_config(m);
    const std::string key(mergers::to_string(m));
    auto& losses = rep.merged_loss[key];
    auto eval = [&](std::size_t t, const LayerMap& w) {
      losses[tasks[t].name] = task_loss(tasks[t], w, nullptr, train.eval_samples);
    };

    switch (m) {
      case Method::ta: {
        const LayerMap w = mergers::merge_ta(base, deltas, mc.lambda);
        for (std::size_t t = 0; t < tasks.size(); ++t) eval(t, w);
        break;
      }
      case Method::ties: {
        const LayerMap w = mergers::merge_ties(base, deltas, mc.lambda, mc.keep_fraction);
        for (std::size_t t = 0; t < tasks.size(); ++t) eval(t, w);
        break;
      }
      case Method::fisher: {
        std::vector<LayerMap> models, fishers;
        for (std::size_t t = 0; t < tasks.size(); ++t) {
          LayerMap theta = base;
          for (auto& [name, w] : theta) w += deltas[t].delta.at(name);
          const Batch b = sample_batch(tasks[t], cfg.fisher_samples,
                                       derive_seed(seed, "fisher:" + tasks[t].name));
          const Vector f = mergers::compute_fisher_diag(
              [&](const Vector& x, const Vector& y) { return weight_gradient(theta, x, y); }, b.x,
              b.y);
          fishers.push_back(unflatten_like(theta, f));
          models.push_back(std::move(theta));
        }
        const LayerMap w = mergers::merge_fisher(base, models, fishers, mc.fisher_floor);
        for (std::size_t t = 0; t < tasks.size(); ++t) eval(t, w);
        break;
      }
      case Method::regmean: {
        std::vector<LayerMap> models, grams;
        for (std::size_t t = 0; t < tasks.size(); ++t) {
          LayerMap theta = base;
          for (auto& [name, w] : theta) w += deltas[t].delta.at(name);
          models.push_back(std::move(theta));
          grams.push_back(mergers::compute_gram(full[t]));
        }
        const LayerMap w = mergers::merge_regmean(base, models, grams, mc.gamma);
        for (std::size_t t = 0; t < tasks.size(); ++t) eval(t, w);
        break;
      }
      case Method::emr: {
        const auto bundle = mergers::merge_emr(base, deltas);
        for (std::size_t t = 0; t < tasks.size(); ++t) eval(t, mergers::emr_task_weights(base, bundle, t));
        break;
      }
    }
    double mean = 0.0;
    for (const auto& [task, v] : losses) mean += v;
    rep.mean_merged_loss[key] = mean / static_cast<double>(losses.size());
  }

  std::vector<int> ks = cfg.rank_ks;
  if (ks.empty()) ks = {2, 8, spec.width, 4 * spec.width};
  rep.rank_table = rank_table(tasks.front(), base, ks, derive_seed(seed, "rank"));
  return rep;
}

json config_json(const PipelineConfig& c) {
  json methods = json::array();
  for (auto m : c.methods) methods.push_back(mergers::to_string(m));
  return {{"num_tasks", c.tasks.num_tasks},
          {"width", c.tasks.width},
          {"subspace_dim", c.tasks.subspace_dim},
          {"sigma", c.tasks.sigma},
          {"layers", c.tasks.layers},
          {"mean_shift", c.tasks.mean_shift},
          {"teacher_scale", c.tasks.teacher_scale},
          {"k", c.k},
          {"r", c.r},
          {"alpha", c.alpha},
          {"methods", methods},
          {"seeds", c.seeds},
          {"osrm", c.osrm},
          {"init_mode", subspace::to_string(c.init_mode)},
          {"interference_mode", subspace::to_string(c.interference_mode)},
          {"steps", c.train.steps},
          {"batch", c.train.batch},
          {"lr", c.train.lr},
          {"momentum", c.train.momentum},
          {"freeze_A", c.train.freeze_A},
          {"eval_samples", c.train.eval_samples},
          {"fisher_samples", c.fisher_samples}};
}

}  // namespace

PipelineConfig default_study() {
  PipelineConfig c;
  c.tasks.num_tasks = 3;
  c.tasks.width = 16;
  c.tasks.subspace_dim = 4;
  c.tasks.sigma = 0.05;
  c.tasks.mean_shift = 2.0;
  c.tasks.teacher_scale = 0.1;
  c.k = 100;
  c.r = 2;
  c.alpha = 4.0;
  c.train.steps = 2000;
  c.train.lr = 0.01;
  c.seeds = {0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  return c;
}

RunReport run_pipeline(const PipelineConfig& cfg) {
  validate(cfg.tasks);
  validate(cfg.train);
  if (cfg.k < 1) throw ValidationError("pipeline: k must be >= 1");
  if (cfg.r < 1 || cfg.r > cfg.tasks.width) throw ValidationError("pipeline: r outside [1, n]");
  if (cfg.seeds.empty()) throw ValidationError("pipeline: no seeds");
  if (cfg.fisher_samples < 1) throw ValidationError("pipeline: fisher_samples must be >= 1");

  RunReport report;
  report.config = cfg;
  report.runs.resize(cfg.seeds.size());
  std::vector<std::exception_ptr> errors(cfg.seeds.size());
  const auto count = static_cast<std::ptrdiff_t>(cfg.seeds.size());

#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    try {
      report.runs[i] = run_seed(cfg, cfg.seeds[i]);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return report;
}

std::string report_json(const RunReport& report) {
  json runs = json::array();
  for (const auto& r : report.runs) {
    json ranks = json::array();
    for (const auto& [k, rank] : r.rank_table) ranks.push_back({{"k", k}, {"rank", rank}});
    runs.push_back({{"seed", r.seed},
                    {"base_loss", r.base_loss},
                    {"initial_loss", r.initial_loss},
                    {"single_task_loss", r.single_task_loss},
                    {"init_objective", r.init_objective},
                    {"interference", r.interference},
                    {"total_interference", r.total_interference},
                    {"merged_loss", r.merged_loss},
                    {"mean_merged_loss", r.mean_merged_loss},
                    {"change_of_A", r.change_of_A},
                    {"rank_table", ranks}});
  }
  return json{{"config", config_json(report.config)}, {"runs", runs}}.dump(2) + "\n";
}

std::string report_csv(const RunReport& report) {
  std::ostringstream out;
  out.precision(17);
  out << "seed,method,task,single_task_loss,merged_loss\n";
  for (const auto& r : report.runs) {
    for (const auto& [method, losses] : r.merged_loss) {
      for (const auto& [task, loss] : losses) {
        out << r.seed << ',' << method << ',' << task << ',' << r.single_task_loss.at(task) << ','
            << loss << '\n';
      }
    }
  }
  return out.str();
}

}  // namespace osrm::harness
