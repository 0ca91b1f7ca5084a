// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero when any criterion fails.
//
//   acceptance [output_dir]

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <string>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "rosetta/distill.hpp"
#include "rosetta/harness.hpp"
#include "rosetta/metrics.hpp"

using namespace rosetta;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool ok;
  std::string line;
};

std::map<int, Verdict> verdicts;

void verdict(int id, bool ok, const std::string& what, const std::string& detail) {
  verdicts[id] = {ok, what + " (" + detail + ")"};
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2e", v);
  return buf;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3f", v);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

// Gradient descent on the mean squared affine-map error, in plain loops.
double descend_affine(const Matrix& s, const Matrix& t) {
  const std::size_t n = s.rows(), d = s.cols();
  std::vector<double> a(d * d, 0.0), b(d, 0.0);
  double scale = 1.0;
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) scale += s(r, c) * s(r, c) / static_cast<double>(n);
  const double step = 0.5 / scale;
  auto objective = [&] {
    double total = 0.0;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t i = 0; i < d; ++i) {
        double y = b[i];
        for (std::size_t j = 0; j < d; ++j) y += a[i * d + j] * s(r, j);
        total += (y - t(r, i)) * (y - t(r, i));
      }
    return total / static_cast<double>(n);
  };
  for (int it = 0; it < 200000; ++it) {
    std::vector<double> ga(d * d, 0.0), gb(d, 0.0);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t i = 0; i < d; ++i) {
        double y = b[i];
        for (std::size_t j = 0; j < d; ++j) y += a[i * d + j] * s(r, j);
        const double e = 2.0 * (y - t(r, i)) / static_cast<double>(n);
        gb[i] += e;
        for (std::size_t j = 0; j < d; ++j) ga[i * d + j] += e * s(r, j);
      }
    double gnorm = 0.0;
    for (std::size_t k = 0; k < ga.size(); ++k) {
      a[k] -= step * ga[k];
      gnorm += ga[k] * ga[k];
    }
    for (std::size_t k = 0; k < d; ++k) {
      b[k] -= step * gb[k];
      gnorm += gb[k] * gb[k];
    }
    if (gnorm < 1e-24) break;
  }
  return objective();
}

bool same_partition(const std::vector<std::size_t>& got, const std::vector<int>& truth) {
  std::map<int, std::size_t> fwd;
  std::map<std::size_t, int> back;
  for (std::size_t i = 0; i < got.size(); ++i) {
    const auto f = fwd.emplace(truth[i], got[i]).first;
    const auto b = back.emplace(got[i], truth[i]).first;
    if (f->second != got[i] || b->second != truth[i]) return false;
  }
  return true;
}

void reproducibility(const fs::path& root) {
  ExperimentConfig c;
  c.output_dir = root / "repro_a";
  const ProtocolResult a = run_reproducibility(c);
  write_protocol_outputs(c.output_dir, a);
  const double r = a.report.find("R-VAE", "RV(R1)").median;
  const double v = a.report.find("VAE", "RV(R1)").median;
  const double b = a.report.find("beta-VAE", "RV(R1)").median;
  verdict(1, r <= -5.0 && r < v && r < b, "reproducibility, R-VAE normalized RV(R1)",
          "R-VAE " + fmt(r) + ", VAE " + fmt(v) + ", beta-VAE " + fmt(b));

  c.output_dir = root / "repro_b";
  write_protocol_outputs(c.output_dir, run_reproducibility(c));
  std::string differing;
  for (const char* f : {"report.csv", "series.csv", "metadata.json", "table.txt"}) {
    const std::string x = slurp(root / "repro_a" / f);
    if (x.empty() || x != slurp(c.output_dir / f)) differing += std::string(differing.empty() ? "" : " ") + f;
  }
  verdict(8, differing.empty(), "repro twice gives byte-identical report files",
          differing.empty() ? "report.csv series.csv metadata.json table.txt match" : "differ: " + differing);
}

void sequential(const fs::path& root) {
  ExperimentConfig c;
  c.protocol = Protocol::sequential;
  c.output_dir = root / "sequential";
  const ProtocolResult res = run_sequential(c);
  write_protocol_outputs(c.output_dir, res);
  const double r = res.report.find("R-VAE", "LSD(D2)").median;
  const double v = res.report.find("VAE", "LSD(D2)").median;
  verdict(2, r < 0.0 && r < v, "sequential, R-VAE normalized LSD(D2)",
          "R-VAE " + fmt(r) + ", VAE " + fmt(v) + ", beta-VAE " +
              fmt(res.report.find("beta-VAE", "LSD(D2)").median));

  // Flatness ordering is informational.
  std::string order;
  for (const char* m : {"VAE", "beta-VAE", "R-VAE"})
    order += std::string(order.empty() ? "" : ", ") + m + " " +
             fmt(res.report.find(m, "spectrum min/max").median);

  const double th = 0.3;
  const MapAnalysis ortho = analyze_map({Matrix{{0.0, 1.0}, {1.0, 0.0}}, {0.0, 0.0}});
  const MapAnalysis rot = analyze_map({oracle::rotation(th), {0.0, 0.0}});
  const MapAnalysis diag = analyze_map({Matrix{{2.0, 0.0}, {0.0, 1.0}}, {0.0, 0.0}});
  const bool ok = ortho.spectrum == Vector{1.0, 1.0} && std::abs(rot.spectrum[0] - 1.0) < 1e-12 &&
                  std::abs(rot.spectrum[1] - 1.0) < 1e-12 && diag.identity_distance == 0.5 &&
                  diag.spectrum == Vector{2.0, 1.0};
  verdict(9, ok, "polar analysis unit cases",
          "permutation spectrum " + fmt(ortho.spectrum[0]) + "," + fmt(ortho.spectrum[1]) +
              "; diag(2,1) identity distance " + fmt(diag.identity_distance) +
              "; not gated, spectrum min/max medians with 1 flat: " + order);
}

void gradients() {
  std::size_t checked = 0, failed = 0;
  for (Activation a : {Activation::tanh, Activation::relu}) {
    for (const auto& rep : gradcheck::run(a, 17)) {
      checked += rep.checked;
      failed += rep.failures;
    }
  }
  verdict(3, failed == 0, "finite-difference gradients for reconstruction, KL and anchor terms",
          std::to_string(checked) + " coordinates, " + std::to_string(failed) + " outside tolerance");
}

void affine_oracle() {
  double worst = 0.0;
  for (unsigned i = 0; i < 10; ++i) {
    const Matrix s = oracle::random_matrix(20, 2, 300 + i);
    const Matrix t = oracle::random_matrix(20, 2, 400 + i, 2.0);
    worst = std::max(worst, std::abs(lsd(s, t) - descend_affine(s, t)));
  }
  verdict(4, worst < 1e-3, "closed-form affine fit matches a gradient-descent minimizer",
          "largest objective gap " + sci(worst));
}

void variability_oracle() {
  std::vector<Matrix> runs;
  for (unsigned k = 0; k < 10; ++k) runs.push_back(oracle::random_matrix(100, 2, 700 + k));
  const RetrainingVariability rv = retraining_variability(runs, 1e-12);
  double want = 0.0, worst = 0.0;
  for (std::size_t r = 0; r < 100; ++r) {
    Matrix stack(10, 2);
    for (std::size_t k = 0; k < 10; ++k) {
      stack(k, 0) = runs[k](r, 0);
      stack(k, 1) = runs[k](r, 1);
    }
    const double ld = oracle::log_det(oracle::two_pass_covariance(stack));
    worst = std::max(worst, std::abs(ld - rv.per_row[r]));
    want += ld / 100.0;
  }
  worst = std::max(worst, std::abs(want - rv.value));
  verdict(5, worst < 1e-9, "retraining variability matches a per-point covariance oracle",
          "largest gap " + sci(worst));
}

void clustering_oracle() {
  const double corners[4][2] = {{-10, -10}, {-10, 10}, {10, -10}, {10, 10}};
  int recovered = 0;
  for (unsigned seed = 0; seed < 20; ++seed) {
    const Matrix noise = oracle::random_matrix(200, 2, 1000 + seed, 0.7);
    Matrix pts(200, 2);
    std::vector<int> truth;
    for (std::size_t r = 0; r < 200; ++r) {
      pts(r, 0) = corners[r % 4][0] + noise(r, 0);
      pts(r, 1) = corners[r % 4][1] + noise(r, 1);
      truth.push_back(static_cast<int>(r % 4));
    }
    if (same_partition(kmeans(pts, {.k = 4, .seed = seed}).assignments, truth)) ++recovered;
  }
  verdict(6, recovered == 20, "k-means recovers four separated blobs",
          std::to_string(recovered) + "/20 seeds exact");
}

void affine_invariance() {
  std::mt19937 gen(2024);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  double worst = 0.0;
  for (unsigned trial = 0; trial < 50; ++trial) {
    const Matrix s = oracle::random_matrix(40, 2, 1500 + trial);
    const Matrix t = oracle::random_matrix(40, 2, 1600 + trial);
    Matrix m(2, 2);
    do {
      for (double& x : m.data()) x = u(gen);
    } while (std::abs(m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0)) < 0.1);
    const double c0 = u(gen), c1 = u(gen);
    Matrix moved = oracle::naive_product(s, m);
    for (std::size_t r = 0; r < moved.rows(); ++r) {
      moved(r, 0) += c0;
      moved(r, 1) += c1;
    }
    worst = std::max(worst, std::abs(lsd(moved, t) - lsd(s, t)));
  }
  verdict(7, worst < 1e-9, "distortion is invariant to invertible affine transforms",
          "largest change " + sci(worst));
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path root = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_out");
  fs::remove_all(root);
  fs::create_directories(root);
  try {
    reproducibility(root);
  } catch (const std::exception& e) {
    verdict(1, false, "reproducibility protocol", std::string("aborted: ") + e.what());
    verdict(8, false, "determinism", "reproducibility protocol aborted");
  }
  try {
    sequential(root);
  } catch (const std::exception& e) {
    verdict(2, false, "sequential protocol", std::string("aborted: ") + e.what());
    verdict(9, false, "polar analysis", "sequential protocol aborted");
  }
  gradients();
  affine_oracle();
  variability_oracle();
  clustering_oracle();
  affine_invariance();
  int failures = 0;
  for (const auto& [id, v] : verdicts) {
    std::printf("%s criterion %d: %s\n", v.ok ? "PASS" : "FAIL", id, v.line.c_str());
    failures += v.ok ? 0 : 1;
  }
  std::printf("%d of %zu criteria failed\n", failures, verdicts.size());
  return failures == 0 ? 0 : 1;
}
