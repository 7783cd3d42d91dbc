#pragma once

// Evaluation metrics over pluggable embedding backends: Inception Score,
// Frechet distance, and the paired embedding distance / similarity
// (FSD / FSS).

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "ftgan/core/error.hpp"
#include "ftgan/corpus/fixture.hpp"
#include "ftgan/corpus/image.hpp"

namespace ftgan::metrics {

using Vector = std::vector<double>;

/// Maps an image to a fixed-length feature vector and, optionally, to a
/// class-probability vector.
class EmbeddingBackend {
 public:
  virtual ~EmbeddingBackend() = default;
  virtual std::string name() const = 0;
  virtual std::size_t dim() const = 0;
  virtual Vector embed(const corpus::Image& img) const = 0;
  virtual std::size_t classes() const { return 0; }
  virtual Vector classify(const corpus::Image&) const {
    throw ContractViolation("backend '" + name() + "' has no classifier");
  }
};

/// Small hand-built embedder for the synthetic shape fixture: per-channel
/// mean and standard deviation plus a grid x grid area-pooled RGB
/// thumbnail, all on the [-1, 1] pixel scale. The classifier is a soft
/// nearest neighbour over labelled exemplar images.
class ToyBackend : public EmbeddingBackend {
 public:
  explicit ToyBackend(int grid = 4, double temperature = 0.05) : grid_(grid), temperature_(temperature) {
    FTGAN_EXPECTS(grid >= 1 && temperature > 0, "bad toy backend parameters");
  }

  std::string name() const override { return "toy-g" + std::to_string(grid_); }
  std::size_t dim() const override { return 6 + 3 * static_cast<std::size_t>(grid_) * grid_; }

  Vector embed(const corpus::Image& img) const override {
    const auto planar = corpus::to_planar(img);
    const std::size_t hw = static_cast<std::size_t>(img.width) * img.height;
    Vector f;
    f.reserve(dim());
    for (int c = 0; c < 3; ++c) {
      double s = 0, ss = 0;
      for (std::size_t i = 0; i < hw; ++i) {
        const double v = planar[c * hw + i];
        s += v;
        ss += v * v;
      }
      const double mean = s / static_cast<double>(hw);
      f.push_back(mean);
      f.push_back(std::sqrt(std::max(0.0, ss / static_cast<double>(hw) - mean * mean)));
    }
    const auto thumb = corpus::resize_planar(planar, 3, img.width, img.height, grid_, grid_);
    f.insert(f.end(), thumb.begin(), thumb.end());
    return f;
  }

  /// Store labelled exemplars.
  void fit(const std::vector<corpus::Image>& images, const std::vector<int>& labels) {
    FTGAN_EXPECTS(!images.empty() && images.size() == labels.size(), "fit needs one label per image");
    FTGAN_EXPECTS(*std::min_element(labels.begin(), labels.end()) >= 0, "labels must be nonnegative");
    classes_ = static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end()) + 1);
    std::vector<int> counts(classes_, 0);
    exemplars_.clear();
    labels_ = labels;
    for (std::size_t i = 0; i < images.size(); ++i) {
      exemplars_.push_back(embed(images[i]));
      ++counts[static_cast<std::size_t>(labels[i])];
    }
    for (std::size_t c = 0; c < classes_; ++c) FTGAN_EXPECTS(counts[c] > 0, "label ", c, " has no images");
  }

  /// Fit colour x shape classes on renders of the synthetic shape corpus
  /// over every background, size and position.
  void fit_shapes(int size = 32) {
    std::vector<corpus::Image> images;
    std::vector<int> labels;
    const int n_shapes = static_cast<int>(corpus::fixture::kShapes.size());
    for (int c = 0; c < static_cast<int>(corpus::fixture::kColors.size()); ++c)
      for (int s = 0; s < n_shapes; ++s)
        for (int bg = 0; bg < static_cast<int>(corpus::fixture::kBackgrounds.size()); ++bg)
          for (int pos = 0; pos < static_cast<int>(corpus::fixture::kPositions.size()); ++pos)
            for (bool large : {true, false}) {
              corpus::ShapeSpec spec{c, s, bg, large, pos};
              images.push_back(corpus::fixture::render(spec, size));
              labels.push_back(c * n_shapes + s);
            }
    fit(images, labels);
  }

  std::size_t classes() const override { return classes_; }

  /// Class posterior from a Gaussian kernel over the exemplars (soft
  /// nearest neighbour), computed in log space.
  Vector classify(const corpus::Image& img) const override {
    FTGAN_EXPECTS(classes_ > 0, "toy classifier is not fitted");
    const auto e = embed(img);
    std::vector<double> logk(exemplars_.size());
    for (std::size_t n = 0; n < exemplars_.size(); ++n) {
      double d = 0;
      for (std::size_t i = 0; i < e.size(); ++i) d += (e[i] - exemplars_[n][i]) * (e[i] - exemplars_[n][i]);
      logk[n] = -d / temperature_;
    }
    const double mx = *std::max_element(logk.begin(), logk.end());
    Vector p(classes_, 0.0);
    for (std::size_t n = 0; n < logk.size(); ++n) p[static_cast<std::size_t>(labels_[n])] += std::exp(logk[n] - mx);
    double s = 0;
    for (double v : p) s += v;
    for (auto& v : p) v /= s;
    return p;
  }

 private:
  int grid_;
  double temperature_;
  std::size_t classes_ = 0;
  std::vector<Vector> exemplars_;
  std::vector<int> labels_;
};

struct ScoreStats {
  double mean = 0;
  double std = 0;
};

/// exp(E_x KL(p(y|x) || p(y))) per split; mean and population standard
/// deviation across splits. Split s covers [s*N/n, (s+1)*N/n).
inline ScoreStats inception_score(const std::vector<Vector>& probs, int n_splits = 10) {
  FTGAN_EXPECTS(n_splits >= 1, "need at least one split");
  FTGAN_EXPECTS(probs.size() >= static_cast<std::size_t>(n_splits), "inception score needs at least ", n_splits,
                " images, got ", probs.size());
  const std::size_t n = probs.size(), k = probs.front().size();
  for (const auto& p : probs) {
    FTGAN_EXPECTS(p.size() == k, "class vectors differ in length");
    double s = 0;
    for (double v : p) {
      FTGAN_EXPECTS(v >= 0, "negative class probability");
      s += v;
    }
    FTGAN_EXPECTS(std::abs(s - 1.0) <= 1e-6, "class probabilities sum to ", s);
  }
  Vector scores;
  for (int sp = 0; sp < n_splits; ++sp) {
    const std::size_t lo = sp * n / n_splits, hi = (sp + 1) * n / n_splits;
    Vector py(k, 0.0);
    for (std::size_t i = lo; i < hi; ++i)
      for (std::size_t c = 0; c < k; ++c) py[c] += probs[i][c];
    for (auto& v : py) v /= static_cast<double>(hi - lo);
    double kl = 0;
    for (std::size_t i = lo; i < hi; ++i)
      for (std::size_t c = 0; c < k; ++c)
        if (probs[i][c] > 0) kl += probs[i][c] * (std::log(probs[i][c]) - std::log(py[c]));
    scores.push_back(std::exp(kl / static_cast<double>(hi - lo)));
  }
  ScoreStats st;
  st.mean = std::accumulate(scores.begin(), scores.end(), 0.0) / static_cast<double>(scores.size());
  for (double s : scores) st.std += (s - st.mean) * (s - st.mean);
  st.std = std::sqrt(st.std / static_cast<double>(scores.size()));
  return st;
}

namespace detail {
inline Eigen::MatrixXd to_matrix(const std::vector<Vector>& rows) {
  Eigen::MatrixXd m(rows.size(), rows.front().size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
        rows[i][j];
  return m;
}

/// Symmetric PSD square root by eigendecomposition, negative eigenvalues
/// clamped to zero.
inline Eigen::MatrixXd sqrt_psd(const Eigen::MatrixXd& a) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (a + a.transpose()));
  return es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}
}  // namespace detail

struct FidResult {
  double value = 0;
  bool clamped = false;  // a negative roundoff total was raised to 0
};

/// Frechet distance between Gaussian fits (unbiased covariance) of two
/// feature sets. Tr((S_r S_f)^1/2) is computed as Tr((A S_f A)^1/2) with
/// A = S_r^1/2, which only involves symmetric matrices. With singular
/// covariances the clamped roots leave an O(sqrt(eps)) asymmetry, so the
/// two orderings are averaged.
inline FidResult fid(const std::vector<Vector>& real, const std::vector<Vector>& fake) {
  FTGAN_EXPECTS(real.size() >= 2 && fake.size() >= 2, "FID needs at least 2 samples per side, got ", real.size(),
                " and ", fake.size());
  const auto d = real.front().size();
  for (const auto* set : {&real, &fake})
    for (const auto& v : *set) FTGAN_EXPECTS(v.size() == d, "feature dimension mismatch: ", v.size(), " vs ", d);
  auto stats = [](const std::vector<Vector>& rows) {
    const auto x = detail::to_matrix(rows);
    Eigen::VectorXd mu = x.colwise().mean();
    Eigen::MatrixXd c = x.rowwise() - mu.transpose();
    Eigen::MatrixXd cov = (c.transpose() * c) / static_cast<double>(x.rows() - 1);
    return std::make_pair(mu, cov);
  };
  const auto [mr, sr] = stats(real);
  const auto [mf, sf] = stats(fake);
  auto trace_sqrt = [](const Eigen::MatrixXd& p, const Eigen::MatrixXd& q) {
    const Eigen::MatrixXd a = detail::sqrt_psd(p);
    const Eigen::MatrixXd m = a * q * a;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
    return es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
  };
  const double tr_sqrt = 0.5 * (trace_sqrt(sr, sf) + trace_sqrt(sf, sr));
  FidResult r;
  r.value = (mr - mf).squaredNorm() + sr.trace() + sf.trace() - 2.0 * tr_sqrt;
  if (r.value < 0) {
    r.clamped = true;
    r.value = 0;
  }
  return r;
}

enum class DistanceNorm { l2, l1 };

/// Mean norm of paired embedding differences.
inline double fsd(const std::vector<Vector>& generated, const std::vector<Vector>& truth,
                  DistanceNorm norm = DistanceNorm::l2) {
  FTGAN_EXPECTS(!generated.empty() && generated.size() == truth.size(), "FSD needs equal, nonzero counts, got ",
                generated.size(), " and ", truth.size());
  double acc = 0;
  for (std::size_t i = 0; i < generated.size(); ++i) {
    FTGAN_EXPECTS(generated[i].size() == truth[i].size(), "embedding dimension mismatch");
    double d = 0;
    for (std::size_t j = 0; j < generated[i].size(); ++j) {
      const double diff = generated[i][j] - truth[i][j];
      d += norm == DistanceNorm::l2 ? diff * diff : std::abs(diff);
    }
    acc += norm == DistanceNorm::l2 ? std::sqrt(d) : d;
  }
  return acc / static_cast<double>(generated.size());
}

struct FssResult {
  double value = 0;          // percent
  std::size_t guarded = 0;   // pairs with a (near) zero embedding
};

/// Mean cosine similarity of paired embeddings, times 100.
inline FssResult fss(const std::vector<Vector>& generated, const std::vector<Vector>& truth, double eps = 1e-12) {
  FTGAN_EXPECTS(!generated.empty() && generated.size() == truth.size(), "FSS needs equal, nonzero counts, got ",
                generated.size(), " and ", truth.size());
  FssResult r;
  double acc = 0;
  for (std::size_t i = 0; i < generated.size(); ++i) {
    FTGAN_EXPECTS(generated[i].size() == truth[i].size(), "embedding dimension mismatch");
    double dot = 0, na = 0, nb = 0;
    for (std::size_t j = 0; j < generated[i].size(); ++j) {
      dot += generated[i][j] * truth[i][j];
      na += generated[i][j] * generated[i][j];
      nb += truth[i][j] * truth[i][j];
    }
    const double den = std::sqrt(na) * std::sqrt(nb);
    if (den < eps) ++r.guarded;
    acc += dot / std::max(den, eps);
  }
  r.value = 100.0 * acc / static_cast<double>(generated.size());
  return r;
}

struct MetricReport {
  std::string backend;
  std::size_t n = 0;  // generated images / evaluated pairs
  ScoreStats inception;
  double fid = 0;
  double fsd = 0;
  double fss = 0;
  std::vector<std::string> notes;

  nlohmann::json to_json() const {
    return {{"backend", backend},
            {"N", n},
            {"inception_score", {{"mean", inception.mean}, {"std", inception.std}}},
            {"fid", fid},
            {"fsd", fsd},
            {"fss", fss},
            {"notes", notes}};
  }

  std::string table() const {
    char buf[512];
    std::snprintf(buf, sizeof buf,
                  "backend  %s\nN        %zu\nIS       %.4f +- %.4f\nFID      %.4f\nFSD      %.4f\nFSS      %.2f%%\n",
                  backend.c_str(), n, inception.mean, inception.std, fid, fsd, fss);
    std::string s = buf;
    for (const auto& note : notes) s += "note     " + note + "\n";
    return s;
  }
};

/// On-disk feature cache keyed by (backend name, image content hash).
class FeatureCache {
 public:
  explicit FeatureCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

  Vector get(const EmbeddingBackend& backend, const corpus::Image& img) {
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(corpus::content_hash(img)));
    const auto path = dir_ / backend.name() / (std::string(hex) + ".f64");
    if (std::ifstream is{path, std::ios::binary}) {
      Vector v(backend.dim());
      is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
      if (is.gcount() == static_cast<std::streamsize>(v.size() * sizeof(double))) {
        ++hits_;
        return v;
      }
    }
    auto v = backend.embed(img);
    std::filesystem::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::binary);
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
    return v;
  }

  std::size_t hits() const { return hits_; }

 private:
  std::filesystem::path dir_;
  std::size_t hits_ = 0;
};

/// Embeddings of `images`, through `cache` when given.
inline std::vector<Vector> embed_all(const EmbeddingBackend& backend, const std::vector<corpus::Image>& images,
                                     FeatureCache* cache = nullptr) {
  std::vector<Vector> out;
  out.reserve(images.size());
  for (const auto& im : images) out.push_back(cache ? cache->get(backend, im) : backend.embed(im));
  return out;
}

}  // namespace ftgan::metrics
