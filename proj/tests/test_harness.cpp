#include <doctest.h>

#include "osrm/error.hpp"
#include "osrm/harness.hpp"
#include "osrm/linalg.hpp"
#include "support.hpp"

#include <cmath>

using namespace osrm;
using namespace osrm::harness;

namespace {

TaskSpec spec(int n, int d, double sigma, int layers = 1, std::uint64_t seed = 0) {
  TaskSpec s;
  s.width = n;
  s.subspace_dim = d;
  s.sigma = sigma;
  s.layers = layers;
  s.seed = seed;
  return s;
}

TrainConfig quick(int steps, double lr = 0.01) {
  TrainConfig c;
  c.steps = steps;
  c.lr = lr;
  c.batch = 16;
  c.eval_samples = 200;
  return c;
}

LoraAdapter random_adapter(std::mt19937_64& rng, const LayerMap& base, int r, double alpha) {
  LoraAdapter a;
  a.task = "T";
  a.r = r;
  a.alpha = alpha;
  for (const auto& [name, w] : base) {
    a.layers[name] = {test::randn(rng, w.rows(), r, 0.3), test::randn(rng, r, w.cols(), 0.3)};
  }
  return a;
}

}  // namespace

TEST_CASE("make_tasks") {
  SUBCASE("bases are orthonormal and distinct") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const TaskSpec s = spec(16, 4, 0.05, 1, seed);
      const auto tasks = make_tasks(make_base_model(16, 1, seed), s);
      REQUIRE(tasks.size() == 3);
      for (const auto& t : tasks) {
        CHECK((t.basis.transpose() * t.basis - Matrix::Identity(4, 4)).norm() < 1e-10);
      }
      for (std::size_t i = 0; i < tasks.size(); ++i) {
        for (std::size_t j = i + 1; j < tasks.size(); ++j) {
          // Cosines of the principal angles are the singular values of UᵢᵀUⱼ.
          const Vector cos = linalg::singular_values(tasks[i].basis.transpose() * tasks[j].basis);
          CHECK(cos.maxCoeff() < 1.0 - 1e-9);
        }
      }
    }
  }
  SUBCASE("same seed gives byte-identical checkpoints") {
    const TaskSpec s = spec(8, 3, 0.1, 2, 42);
    const auto a = make_tasks(make_base_model(8, 2, 42), s);
    const auto b = make_tasks(make_base_model(8, 2, 42), s);
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(io::serialize(to_checkpoint(a[i])) == io::serialize(to_checkpoint(b[i])));
    }
    const auto back = task_from_checkpoint(io::deserialize(io::serialize(to_checkpoint(a[1]))));
    CHECK(back.name == "T2");
    CHECK(back.seed == a[1].seed);
    CHECK(back.teacher == a[1].teacher);
    CHECK(back.basis == a[1].basis);
  }
  SUBCASE("noise-free one-dimensional tasks give rank-1 features") {
    const auto base = make_base_model(6, 1, 1);
    const auto tasks = make_tasks(base, spec(6, 1, 0.0));
    for (int k : {1, 3, 20}) {
      CHECK(linalg::rank_of(collect_features(tasks[0], base, k, 5).layers["layer0"], 1e-8) == 1);
    }
    for (const auto& [k, rank] : rank_table(tasks[1], base, {1, 2, 8, 24}, 3)) CHECK(rank == 1);
  }
  SUBCASE("invalid specs") {
    const auto base = make_base_model(4, 1, 0);
    CHECK_THROWS_AS(make_tasks(base, spec(4, 4, 0.1)), ValidationError);
    TaskSpec one = spec(4, 2, 0.1);
    one.num_tasks = 1;
    CHECK_THROWS_AS(make_tasks(base, one), ValidationError);
    CHECK_THROWS_AS(make_tasks(base, spec(4, 2, 0.1, 2)), ValidationError);
  }
}

TEST_CASE("noisy features have full rank") {
  const auto base = make_base_model(16, 1, 2);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto tasks = make_tasks(base, spec(16, 4, 0.1, 1, seed));
    const auto table = rank_table(tasks[0], base, {2, 8, 16, 64}, seed);
    CHECK(table == std::vector<std::pair<int, int>>{{2, 2}, {8, 8}, {16, 16}, {64, 16}});
  }
}

TEST_CASE("collect_features") {
  const auto base1 = make_base_model(5, 1, 3);
  const auto t1 = make_tasks(base1, spec(5, 2, 0.1));
  const auto bank = collect_features(t1[0], base1, 7, 11);
  CHECK(bank.layers.at("layer0") == sample_batch(t1[0], 7, 11).x);
  CHECK(collect_features(t1[0], base1, 1, 11).layers.at("layer0").rows() == 1);

  // Second layer sees tanh of the first layer's output; with W = I that is tanh(x).
  LayerMap base2 = make_base_model(5, 2, 3);
  base2["layer0"] = Matrix::Identity(5, 5);
  const auto t2 = make_tasks(base2, spec(5, 2, 0.1, 2));
  LoraAdapter zero = gaussian_init("T1", base2, 2, 4.0, 0);
  const auto b2 = collect_features(t2[0], base2, 9, 12, &zero);
  const Matrix x = sample_batch(t2[0], 9, 12).x;
  Matrix expect(9, 5);
  for (int i = 0; i < 9; ++i)
    for (int j = 0; j < 5; ++j) expect(i, j) = std::tanh(x(i, j));
  CHECK(test::max_abs_diff(b2.layers.at("layer1"), expect) < 1e-15);
}

TEST_CASE("analytic gradients agree with finite differences") {
  std::mt19937_64 rng(4);
  for (int layers : {1, 2}) {
    const auto base = make_base_model(4, layers, 4);
    const auto task = make_tasks(base, spec(4, 2, 0.1, layers))[0];
    const Batch b = sample_batch(task, 6, 9);
    LoraAdapter ad = random_adapter(rng, base, 2, 3.0);
    const auto g = lora_gradients(base, ad, b.x, b.y);
    CHECK(g.loss == doctest::Approx(mse_loss(base, &ad, b.x, b.y)).epsilon(1e-14));
    const double h = 1e-6;
    for (auto& [name, l] : ad.layers) {
      for (Matrix* m : {&l.b, &l.a}) {
        const Matrix& grad = m == &l.b ? g.grads.at(name).b : g.grads.at(name).a;
        for (Eigen::Index i = 0; i < m->size(); ++i) {
          const double keep = m->data()[i];
          m->data()[i] = keep + h;
          const double up = mse_loss(base, &ad, b.x, b.y);
          m->data()[i] = keep - h;
          const double down = mse_loss(base, &ad, b.x, b.y);
          m->data()[i] = keep;
          CHECK(grad.data()[i] == doctest::Approx((up - down) / (2 * h)).epsilon(1e-6));
        }
      }
    }

    LayerMap w = base;
    const Vector x = b.x.row(0).transpose(), y = b.y.row(0).transpose();
    const Vector wg = weight_gradient(w, x, y);
    const LayerMap gm = unflatten_like(w, wg);
    for (auto& [name, m] : w) {
      for (Eigen::Index i = 0; i < m.size(); ++i) {
        const double keep = m.data()[i];
        m.data()[i] = keep + h;
        const double up = mse_loss(w, nullptr, x.transpose(), y.transpose());
        m.data()[i] = keep - h;
        const double down = mse_loss(w, nullptr, x.transpose(), y.transpose());
        m.data()[i] = keep;
        CHECK(gm.at(name).data()[i] == doctest::Approx((up - down) / (2 * h)).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("finetune") {
  SUBCASE("zero steps leave a zero delta") {
    const auto base = make_base_model(8, 2, 5);
    const auto task = make_tasks(base, spec(8, 3, 0.05, 2))[0];
    const auto res = finetune(task, base, gaussian_init("T1", base, 2, 4, 1), quick(0));
    for (const auto& [k, d] : adapters::lora_delta(res.adapter).delta) CHECK(d.isZero(0.0));
    CHECK(res.final_loss == task_loss(task, base, nullptr, 200));
    CHECK(res.initial_loss == res.final_loss);
  }
  SUBCASE("teacher equal to base is a fixed point") {
    const auto base = make_base_model(6, 1, 6);
    TaskSpec s = spec(6, 2, 0.05);
    s.teacher_scale = 0.0;
    const auto task = make_tasks(base, s)[0];
    const auto res = finetune(task, base, gaussian_init("T1", base, 2, 4, 1), quick(200));
    CHECK(res.initial_loss == 0.0);
    CHECK(res.final_loss <= res.initial_loss + 1e-10);
  }
  SUBCASE("rank-2 linear task reaches its least-squares floor") {
    const auto base = make_base_model(4, 1, 7);
    const auto task = make_tasks(base, spec(4, 2, 0.1, 1, 7))[0];
    // Least-squares floor over all 4x4 W: y is an exact linear function of x.
    const Batch big = sample_batch(task, 2000, 1);
    const Matrix w_ls = big.x.colPivHouseholderQr().solve(big.y).transpose();
    const double floor = (big.x * w_ls.transpose() - big.y).squaredNorm() / 2000.0;
    CHECK(floor < 1e-20);

    TrainConfig cfg = quick(2000, 0.05);
    cfg.batch = 32;
    const auto res = finetune(task, base, gaussian_init("T1", base, 2, 2.0, 3), cfg);
    CHECK(res.final_loss < 0.1 * res.initial_loss);
    CHECK(res.final_loss >= floor);
  }
  SUBCASE("divergence reports the step") {
    const auto base = make_base_model(8, 1, 8);
    const auto task = make_tasks(base, spec(8, 3, 0.05, 1, 8))[0];
    try {
      finetune(task, base, gaussian_init("T1", base, 2, 16, 1), quick(500, 50.0));
      FAIL("expected divergence");
    } catch (const TrainingDivergedError& e) {
      CHECK(e.step() < 500);
    }
  }
  SUBCASE("same seed, same adapter") {
    const auto base = make_base_model(6, 2, 9);
    const auto task = make_tasks(base, spec(6, 2, 0.05, 2, 9))[1];
    const auto init = gaussian_init("T2", base, 2, 4, 2);
    const auto a = finetune(task, base, init, quick(100));
    const auto b = finetune(task, base, init, quick(100));
    CHECK(io::serialize(adapters::to_checkpoint(a.adapter)) ==
          io::serialize(adapters::to_checkpoint(b.adapter)));
  }
  SUBCASE("frozen A does not move") {
    const auto base = make_base_model(6, 1, 10);
    const auto task = make_tasks(base, spec(6, 2, 0.05))[0];
    const auto init = gaussian_init("T1", base, 2, 4, 3);
    TrainConfig cfg = quick(100);
    cfg.freeze_A = true;
    const auto res = finetune(task, base, init, cfg);
    CHECK(res.adapter.layers.at("layer0").a == init.layers.at("layer0").a);
    CHECK(change_of_A_report(init, res.adapter).at("layer0") < 1e-12);
  }
  SUBCASE("invalid configs") {
    const auto base = make_base_model(4, 1, 0);
    const auto task = make_tasks(base, spec(4, 2, 0.1))[0];
    const auto init = gaussian_init("T1", base, 2, 4, 0);
    TrainConfig c = quick(10);
    c.momentum = 1.0;
    CHECK_THROWS_AS(finetune(task, base, init, c), ValidationError);
    c = quick(10, -1.0);
    CHECK_THROWS_AS(finetune(task, base, init, c), ValidationError);
  }
}

TEST_CASE("merged TA output decomposes into own delta plus cross-task terms") {
  std::mt19937_64 rng(11);
  const auto base = make_base_model(6, 1, 11);
  const Matrix& w0 = base.at("layer0");
  const double lambda = 0.3;
  std::vector<LoraAdapter> ads;
  std::vector<adapters::TaskVector> deltas;
  for (int t = 0; t < 3; ++t) {
    ads.push_back(random_adapter(rng, base, 2, 4.0));
    deltas.push_back(adapters::lora_delta(ads.back()));
  }
  const Matrix wm = mergers::merge_ta(base, deltas, lambda).at("layer0");
  for (int rep = 0; rep < 20; ++rep) {
    const Vector h = test::randn(rng, 6, 1).col(0);
    const auto& l1 = ads[0].layers.at("layer0");
    const double s = ads[0].scale();
    const Vector lhs = wm * h - adapters::apply_adapter(w0, l1, s, h);
    Vector rhs = (lambda - 1.0) * s * (l1.b * (l1.a * h));
    for (int t = 1; t < 3; ++t) {
      const auto& l = ads[t].layers.at("layer0");
      rhs += lambda * s * (l.b * (l.a * h));
    }
    CHECK((lhs - rhs).norm() < 1e-10);
  }
}

TEST_CASE("pipeline") {
  PipelineConfig cfg;
  cfg.tasks = spec(8, 2, 0.05);
  cfg.tasks.mean_shift = 2.0;
  cfg.tasks.teacher_scale = 0.1;
  cfg.k = 20;
  cfg.r = 2;
  cfg.alpha = 4;
  cfg.train = quick(50);
  cfg.fisher_samples = 16;
  cfg.seeds = {0, 1};

  SUBCASE("noise-free, untrained OSRM adapters interfere with nothing") {
    PipelineConfig c = cfg;
    c.tasks.sigma = 0.0;
    c.train.steps = 0;
    const auto rep = run_pipeline(c);
    for (const auto& run : rep.runs) {
      for (const auto& [pair, v] : run.interference) CHECK(v == 0.0);
      for (const auto& [task, v] : run.init_objective) CHECK(v <= 1e-9);
    }
  }
  SUBCASE("frozen A keeps averaged out-of-task features annihilated") {
    PipelineConfig c = cfg;
    c.train.freeze_A = true;
    const auto rep = run_pipeline(c);
    for (const auto& run : rep.runs) {
      for (const auto& [pair, v] : run.interference) CHECK(v <= 1e-8);
      for (const auto& [task, layers] : run.change_of_A) {
        for (const auto& [layer, d] : layers) CHECK(d == 0.0);
      }
    }
  }
  SUBCASE("report is deterministic and complete") {
    const auto a = report_json(run_pipeline(cfg));
    const auto b = report_json(run_pipeline(cfg));
    CHECK(a == b);
    const auto j = nlohmann::json::parse(a);
    CHECK(j["runs"].size() == 2);
    CHECK(j["runs"][0]["merged_loss"].size() == 5);
    CHECK(j["runs"][0]["interference"].size() == 6);
    for (const auto& [method, v] : j["runs"][1]["mean_merged_loss"].items()) {
      CHECK(std::isfinite(v.get<double>()));
      CHECK(v.get<double>() >= 0.0);
    }
    const auto csv = report_csv(run_pipeline(cfg));
    CHECK(csv.rfind("seed,method,task,single_task_loss,merged_loss\n", 0) == 0);
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 * 5 * 3);
  }
  SUBCASE("training lowers the loss") {
    const auto rep = run_pipeline(cfg);
    for (const auto& run : rep.runs) {
      for (const auto& [task, loss] : run.single_task_loss) CHECK(loss <= run.initial_loss.at(task));
    }
  }
}
