#include "doctest_torch.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "dsba/defenses.hpp"
#include "dsba/errors.hpp"

using namespace dsba;

namespace {

Classifier constant_logits(torch::Tensor row) {
  return [row](const torch::Tensor& x) { return row.unsqueeze(0).expand({x.size(0), row.size(0)}); };
}

/// Softmax over a linear function of the mean pixel value; differentiable in the input.
Classifier mean_pixel_classifier(std::int64_t classes) {
  return [classes](const torch::Tensor& x) {
    const auto m = x.mean({1, 2, 3}).unsqueeze(1);
    return m * torch::arange(classes, x.options()).unsqueeze(0);
  };
}

}  // namespace

TEST_SUITE("defenses") {
  TEST_CASE("AUROC counts ties as one half") {
    const std::vector<double> lo{0.1, 0.2, 0.3}, hi{0.7, 0.8, 0.9};
    CHECK(auroc(lo, hi) == 1.0);
    CHECK(auroc(hi, lo) == 0.0);
    CHECK(auroc(lo, lo) == 0.5);
    const std::vector<double> a{1.0, 2.0}, b{2.0, 3.0};
    CHECK(auroc(a, b) == doctest::Approx(0.875));
    CHECK_THROWS_AS(auroc({}, hi), PreconditionError);
  }

  TEST_CASE("summary statistics") {
    const std::vector<double> v{1.0, 2.0, 3.0, 4.0};
    const auto s = summarize(v);
    CHECK(s.mean == 2.5);
    CHECK(s.min == 1.0);
    CHECK(s.max == 4.0);
    CHECK(s.stddev == doctest::Approx(std::sqrt(1.25)));
  }

  TEST_CASE("STRIP entropy of a uniform classifier is ln C, of a one-hot classifier zero") {
    const auto x = torch::rand({6, 3, 8, 8});
    const auto pool = torch::rand({20, 3, 8, 8});
    for (double h : strip_entropies(constant_logits(torch::zeros({10})), x, pool, StripConfig{8, 0}))
      CHECK(h == doctest::Approx(std::log(10.0)).epsilon(1e-6));
    auto peaked = torch::zeros({10});
    peaked[3] = 1000.0;
    for (double h : strip_entropies(constant_logits(peaked), x, pool, StripConfig{8, 0})) CHECK(h == doctest::Approx(0.0));
    CHECK_THROWS_AS(strip_entropies(constant_logits(peaked), x, pool, StripConfig{4, 0}), PreconditionError);
    CHECK_THROWS_AS(strip_entropies(constant_logits(peaked), x, torch::empty({0, 3, 8, 8}), StripConfig{8, 0}),
                    PreconditionError);
  }

  TEST_CASE("STRIP test reports both populations and is reproducible") {
    const auto clean = torch::rand({16, 3, 8, 8}) * 0.5;
    const auto poisoned = torch::rand({16, 3, 8, 8}) * 0.5 + 0.5;
    const auto pool = torch::rand({32, 3, 8, 8});
    const auto cls = mean_pixel_classifier(4);
    const auto a = strip_entropy_test(cls, clean, poisoned, pool, StripConfig{16, 5});
    const auto b = strip_entropy_test(cls, clean, poisoned, pool, StripConfig{16, 5});
    CHECK(a.clean_entropy.size() == 16);
    CHECK(a.poisoned_entropy == b.poisoned_entropy);
    CHECK(a.auroc == b.auroc);
    CHECK(a.auroc >= 0.0);
    CHECK(a.auroc <= 1.0);
    const auto j = to_json(a);
    CHECK(j.contains("auroc"));
  }

  TEST_CASE("separability is near chance for indistinguishable features and near one for offset ones") {
    torch::manual_seed(1);
    const auto a = torch::randn({64, 8}), b = torch::randn({64, 8});
    CHECK(std::abs(latent_separability_score(a, b).probe_auroc - 0.5) < 0.15);
    const auto far = latent_separability_score(a, b + 3.0);
    CHECK(far.probe_auroc > 0.99);
    CHECK(far.silhouette > 0.5);
    CHECK(far.projection.sizes() == std::vector<std::int64_t>{128, 2});
    CHECK(far.cluster.size() == 128);
  }

  TEST_CASE("separability does not depend on which side is called poisoned") {
    torch::manual_seed(2);
    const auto a = torch::randn({40, 6}), b = torch::randn({40, 6}) + 0.4;
    CHECK(latent_separability_score(a, b, 3).probe_auroc ==
          doctest::Approx(latent_separability_score(b, a, 3).probe_auroc).epsilon(1e-9));
  }

  TEST_CASE("separability preconditions") {
    CHECK_THROWS_AS(latent_separability_score(torch::randn({8, 4}), torch::randn({32, 4})), PreconditionError);
    CHECK_THROWS_AS(latent_separability_score(torch::ones({20, 4}), torch::ones({20, 4})), PreconditionError);
    CHECK_THROWS_AS(latent_separability_score(torch::randn({20, 4}), torch::randn({20, 5})), PreconditionError);
  }

  TEST_CASE("PCA, k-means and silhouette on two blobs") {
    torch::manual_seed(3);
    auto pts = torch::cat({torch::randn({30, 2}) * 0.1, torch::randn({30, 2}) * 0.1 + 5.0});
    const auto cl = kmeans(pts, 2, 0);
    for (int i = 1; i < 30; ++i) CHECK(cl[i] == cl[0]);
    for (int i = 31; i < 60; ++i) CHECK(cl[i] == cl[30]);
    CHECK(cl[0] != cl[30]);
    CHECK(silhouette_score(pts, cl) > 0.9);
    const std::vector<int> one(60, 0);
    CHECK(silhouette_score(pts, one) == 0.0);
    const auto proj = pca_project(pts, 1);
    CHECK(std::abs(proj[0][0].item<double>() - proj[59][0].item<double>()) > 5.0);
    CHECK_THROWS_AS(pca_project(torch::ones({5, 3}), 2), PreconditionError);
  }

  TEST_CASE("anomaly index of norms") {
    const std::vector<double> flat(5, 3.0);
    CHECK(anomaly_index_from_norms(flat) == 0.0);
    const std::vector<double> outlier{10, 10, 10, 10, 1};
    CHECK(anomaly_index_from_norms(outlier) > 2.0);
    const std::vector<double> spread{5.0, 6.0, 7.0, 8.0, 9.0};
    // median 7, MAD 1: |7 - 5| / 1.4826.
    CHECK(anomaly_index_from_norms(spread) == doctest::Approx(2.0 / 1.4826));
    auto perm = spread;
    std::reverse(perm.begin(), perm.end());
    std::rotate(perm.begin(), perm.begin() + 2, perm.end());
    CHECK(anomaly_index_from_norms(perm) == anomaly_index_from_norms(spread));
    CHECK_THROWS_AS(anomaly_index_from_norms({}), PreconditionError);
  }

  TEST_CASE("trigger inversion returns one finite norm per class") {
    const auto x = torch::rand({8, 3, 8, 8});
    const auto r = nc_anomaly_index(mean_pixel_classifier(3), x, 3, NcConfig{5, 0.01, 0.1, 0});
    REQUIRE(r.norms.size() == 3);
    for (double n : r.norms) {
      CHECK(std::isfinite(n));
      CHECK(n >= 0.0);
      CHECK(n <= 64.0);
    }
    CHECK(r.flagged_class == std::min_element(r.norms.begin(), r.norms.end()) - r.norms.begin());
    const auto again = nc_anomaly_index(mean_pixel_classifier(3), x, 3, NcConfig{5, 0.01, 0.1, 0});
    CHECK(again.norms == r.norms);
    CHECK_THROWS_AS(nc_anomaly_index(mean_pixel_classifier(1), x, 1, NcConfig{}), PreconditionError);
  }
}
