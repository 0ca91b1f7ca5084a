#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <map>
#include <set>

#include "oracles.hpp"
#include "rosetta/distill.hpp"

using namespace rosetta;

namespace {

// Four tight blobs at the corners of a square, 30 points each.
Matrix four_blobs(unsigned seed, std::vector<int>* truth = nullptr) {
  const double corners[4][2] = {{-10, -10}, {-10, 10}, {10, -10}, {10, 10}};
  const Matrix noise = oracle::random_matrix(120, 2, seed, 0.5);
  Matrix m(120, 2);
  for (std::size_t r = 0; r < 120; ++r) {
    m(r, 0) = corners[r / 30][0] + noise(r, 0);
    m(r, 1) = corners[r / 30][1] + noise(r, 1);
    if (truth) truth->push_back(static_cast<int>(r / 30));
  }
  return m;
}

// Assignments equal the truth up to relabelling.
bool same_partition(const std::vector<std::size_t>& got, const std::vector<int>& truth) {
  std::map<int, std::size_t> forward;
  std::map<std::size_t, int> backward;
  for (std::size_t i = 0; i < got.size(); ++i) {
    auto [f, fnew] = forward.emplace(truth[i], got[i]);
    auto [b, bnew] = backward.emplace(got[i], truth[i]);
    if (f->second != got[i] || b->second != truth[i]) return false;
  }
  return true;
}

double brute_inertia(const Matrix& pts, const Matrix& centroids, const std::vector<std::size_t>& a) {
  double s = 0.0;
  for (std::size_t r = 0; r < pts.rows(); ++r) s += squared_distance(pts.row(r), centroids.row(a[r]));
  return s;
}

Dataset inputs_for(const Matrix& latents) {
  Dataset d{Matrix(latents.rows(), 3)};
  for (std::size_t r = 0; r < latents.rows(); ++r) d.inputs(r, 0) = static_cast<double>(r);
  return d;
}

}  // namespace

TEST_CASE("kmeans recovers four separated blobs") {
  std::vector<int> truth;
  const Matrix pts = four_blobs(3, &truth);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ClusterResult c = kmeans(pts, {.k = 4, .seed = seed});
    CHECK(same_partition(c.assignments, truth));
    CHECK(c.inertia == doctest::Approx(brute_inertia(pts, c.centroids, c.assignments)));
  }
}

TEST_CASE("kmeans with k equal to n has zero inertia") {
  const Matrix pts = oracle::random_matrix(6, 2, 1);
  const ClusterResult c = kmeans(pts, {.k = 6});
  CHECK(c.inertia == doctest::Approx(0.0));
  std::set<std::size_t> used(c.assignments.begin(), c.assignments.end());
  CHECK(used.size() == 6);
}

TEST_CASE("kmeans with k one returns the mean") {
  const Matrix pts{{0, 0}, {2, 0}, {4, 6}};
  const ClusterResult c = kmeans(pts, {.k = 1});
  CHECK(c.centroids(0, 0) == doctest::Approx(2.0));
  CHECK(c.centroids(0, 1) == doctest::Approx(2.0));
}

TEST_CASE("kmeans inertia never increases across iterations") {
  const Matrix pts = oracle::random_matrix(200, 2, 9);
  const ClusterResult c = kmeans(pts, {.k = 8, .seed = 4});
  REQUIRE_FALSE(c.inertia_history.empty());
  for (std::size_t i = 1; i < c.inertia_history.size(); ++i)
    CHECK(c.inertia_history[i] <= c.inertia_history[i - 1] + 1e-9);
}

TEST_CASE("kmeans argument errors") {
  const Matrix pts = oracle::random_matrix(3, 2, 1);
  CHECK_THROWS_AS(kmeans(pts, {.k = 0}), DistillError);
  CHECK_THROWS_AS(kmeans(pts, {.k = 4}), DistillError);
}

TEST_CASE("nearest row breaks ties toward the lower index") {
  const Matrix pts{{1, 0}, {-1, 0}, {0, 5}};
  CHECK(nearest_row(pts, Vector{0.0, 0.0}) == 0);
  CHECK(nearest_row(pts, Vector{0.0, 4.0}) == 2);
}

TEST_CASE("select_rosetta takes the embedding row closest to each centroid") {
  const Matrix latents{{0, 0}, {1, 0}, {10, 10}, {11, 10}};
  const Dataset data = inputs_for(latents);
  const EmbeddingTable table{latents, "src"};
  ClusterResult c;
  c.centroids = Matrix{{0.4, 0.0}, {10.9, 10.0}};
  const RosettaSet rs = select_rosetta(table, c, data);
  CHECK(rs.source_rows == std::vector<std::size_t>{0, 3});
  CHECK(rs.latents.row_copy(1) == Vector{11.0, 10.0});
  CHECK(rs.inputs(1, 0) == 3.0);
  CHECK(rs.source_digest == "src");
}

TEST_CASE("ward linkage splits two obvious pairs") {
  const Matrix pts{{0, 0}, {10, 0}, {0.1, 0}, {10.2, 0}};
  const ClusterResult c = ward_agglomerative(pts, 2);
  CHECK(c.assignments == std::vector<std::size_t>{0, 1, 0, 1});
  CHECK(c.centroids(0, 0) == doctest::Approx(0.05));
  CHECK(c.centroids(1, 0) == doctest::Approx(10.1));
  CHECK_THROWS_AS(ward_agglomerative(pts, 5), DistillError);
}

TEST_CASE("ward linkage recovers the blobs") {
  std::vector<int> truth;
  const Matrix pts = four_blobs(4, &truth);
  CHECK(same_partition(ward_agglomerative(pts, 4).assignments, truth));
}

TEST_CASE("gmm means agree with kmeans on separated blobs") {
  const Matrix pts = four_blobs(5);
  const GmmResult g = fit_gmm(pts, 4, 2);
  const ClusterResult c = kmeans(pts, {.k = 4, .seed = 2});
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t j = nearest_row(c.centroids, g.means.row(i));
    CHECK(std::sqrt(squared_distance(g.means.row(i), c.centroids.row(j))) < 0.05);
  }
  double wsum = 0.0;
  for (double w : g.weights) wsum += w;
  CHECK(wsum == doctest::Approx(1.0));
}

TEST_CASE("random selector draws distinct seeded rows") {
  const Matrix latents = oracle::random_matrix(20, 2, 7);
  const Dataset data = inputs_for(latents);
  const EmbeddingTable table{latents, "t"};
  const Selection a = select_variant(table, data, 5, Selector::random, 3);
  const Selection b = select_variant(table, data, 5, Selector::random, 3);
  CHECK(a.rosetta.source_rows == b.rosetta.source_rows);
  std::set<std::size_t> rows(a.rosetta.source_rows.begin(), a.rosetta.source_rows.end());
  CHECK(rows.size() == 5);
  CHECK(a.rosetta.selector == "random");
  for (std::size_t i = 0; i < 5; ++i)
    CHECK(a.rosetta.latents.row_copy(i) == latents.row_copy(a.rosetta.source_rows[i]));
}

TEST_CASE("every selector returns k pairs taken from the table") {
  const Matrix latents = four_blobs(6);
  const Dataset data = inputs_for(latents);
  const EmbeddingTable table{latents, "t"};
  for (Selector s : {Selector::kmeans, Selector::agglomerative, Selector::gmm, Selector::random}) {
    const Selection sel = select_variant(table, data, 4, s, 1);
    CHECK(sel.rosetta.size() == 4);
    CHECK(parse_selector(selector_name(s)) == s);
    for (std::size_t i = 0; i < 4; ++i) {
      const std::size_t r = sel.rosetta.source_rows[i];
      CHECK(sel.rosetta.inputs(i, 0) == static_cast<double>(r));
    }
  }
  CHECK_THROWS_AS(parse_selector("spectral"), DistillError);
  CHECK_THROWS_AS(select_variant(table, data, 0, Selector::kmeans, 0), DistillError);
}

TEST_CASE("embed and rosetta files round-trip") {
  const ModelState m = init_model(Architecture{}, 3);
  const Dataset data = gen_8gaussians({.n_per_component = 5});
  const EmbeddingTable table = embed(m, data);
  CHECK(table.size() == 40);
  CHECK(table.means == encode_means(m, data.inputs));
  CHECK(table.source_digest == m.digest());
  const Selection sel = select_variant(table, data, 8, Selector::kmeans, 0);
  const auto path = std::filesystem::temp_directory_path() / "rosetta_test_pairs.csv";
  save_rosetta(path, sel.rosetta);
  const RosettaSet back = load_rosetta(path);
  CHECK(back.inputs == sel.rosetta.inputs);
  CHECK(back.latents == sel.rosetta.latents);
  CHECK(back.source_rows == sel.rosetta.source_rows);
  CHECK(back.selector == "kmeans");
  CHECK(back.source_digest == sel.rosetta.source_digest);
}

TEST_CASE("kmeans on forty points matches a brute-force nearest-mean oracle") {
  // Blobs 10 sigma apart, sigma = 1.
  const double centers[4][2] = {{0, 0}, {10, 0}, {0, 10}, {10, 10}};
  const Matrix noise = oracle::random_matrix(40, 2, 5);
  Matrix pts(40, 2);
  std::vector<int> truth;
  for (std::size_t r = 0; r < 40; ++r) {
    pts(r, 0) = centers[r / 10][0] + noise(r, 0);
    pts(r, 1) = centers[r / 10][1] + noise(r, 1);
    truth.push_back(static_cast<int>(r / 10));
  }
  const ClusterResult c = kmeans(pts, {.k = 4, .seed = 5});
  for (const auto& center : centers) {
    const std::size_t j = nearest_row(c.centroids, Vector{center[0], center[1]});
    CHECK(std::sqrt(squared_distance(c.centroids.row(j), Vector{center[0], center[1]})) < 0.5);
  }
  for (std::size_t r = 0; r < 40; ++r) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < 4; ++j)
      if (squared_distance(pts.row(r), c.centroids.row(j)) < squared_distance(pts.row(r), c.centroids.row(best)))
        best = j;
    CHECK(c.assignments[r] == best);
  }
  CHECK(same_partition(c.assignments, truth));
}

TEST_CASE("single cluster selects the row nearest the mean") {
  const Matrix latents{{0, 0}, {1, 1}, {3, 3}};
  const ClusterResult c = kmeans(latents, {.k = 1});
  CHECK(c.centroids(0, 0) == doctest::Approx(4.0 / 3.0));
  CHECK(c.centroids(0, 1) == doctest::Approx(4.0 / 3.0));
  const RosettaSet rs = select_rosetta({latents, "t"}, c, inputs_for(latents));
  CHECK(rs.latents.row_copy(0) == Vector{1.0, 1.0});
}

TEST_CASE("gmm partition matches kmeans on separated blobs") {
  const Matrix pts = four_blobs(5);
  const GmmResult g = fit_gmm(pts, 4, 5);
  const ClusterResult c = kmeans(pts, {.k = 4, .seed = 5});
  std::vector<int> km(c.assignments.begin(), c.assignments.end());
  CHECK(same_partition(g.assignments, km));
}
