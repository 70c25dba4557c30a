#pragma once

// Symmetric weighted kNN graph over covariates, stored as an
// orientation-closed directed edge list in CSR order (sorted by source, then
// destination). Targets are never read.

#include "gcdro/core.hpp"

#include <algorithm>
#include <fstream>
#include <queue>
#include <string>
#include <vector>

namespace gcdro {

enum class WeightScheme { Gaussian, Binary };

inline const char* to_string(WeightScheme s) { return s == WeightScheme::Gaussian ? "gaussian" : "binary"; }

struct Edge {
  std::size_t src = 0;
  std::size_t dst = 0;
  double weight = 0.0;
};

class Graph {
 public:
  Graph() = default;

  // Builds from undirected pairs (a < b not required); both orientations are
  // emitted with the same weight.
  static Graph from_undirected(std::size_t n, const std::vector<Edge>& undirected, double bandwidth = 0.0,
                               std::size_t k = 0, WeightScheme scheme = WeightScheme::Binary) {
    Graph g;
    g.n_ = n;
    g.bandwidth_ = bandwidth;
    g.k_ = k;
    g.scheme_ = scheme;
    g.edges_.reserve(2 * undirected.size());
    for (const auto& e : undirected) {
      require(e.src < n && e.dst < n, ErrorKind::InvalidConfig, "edge (", e.src, ",", e.dst, ") out of range");
      require(e.src != e.dst, ErrorKind::InvalidConfig, "self-loop at node ", e.src);
      require(e.weight > 0.0 && std::isfinite(e.weight), ErrorKind::InvalidConfig, "edge weight must be positive");
      g.edges_.push_back({e.src, e.dst, e.weight});
      g.edges_.push_back({e.dst, e.src, e.weight});
    }
    std::sort(g.edges_.begin(), g.edges_.end(), [](const Edge& a, const Edge& b) {
      return a.src != b.src ? a.src < b.src : a.dst < b.dst;
    });
    for (std::size_t e = 1; e < g.edges_.size(); ++e)
      require(g.edges_[e].src != g.edges_[e - 1].src || g.edges_[e].dst != g.edges_[e - 1].dst,
              ErrorKind::InvalidConfig, "duplicate edge (", g.edges_[e].src, ",", g.edges_[e].dst, ")");
    g.offsets_.assign(n + 1, 0);
    for (const auto& e : g.edges_) ++g.offsets_[e.src + 1];
    for (std::size_t i = 0; i < n; ++i) g.offsets_[i + 1] += g.offsets_[i];
    g.reverse_.resize(g.edges_.size());
    for (std::size_t e = 0; e < g.edges_.size(); ++e) g.reverse_[e] = g.find_edge(g.edges_[e].dst, g.edges_[e].src);
    return g;
  }

  std::size_t n() const { return n_; }
  std::size_t num_directed_edges() const { return edges_.size(); }
  std::span<const Edge> edges() const { return edges_; }
  std::span<const Edge> neighbors(std::size_t i) const {
    return std::span<const Edge>(edges_).subspan(offsets_[i], offsets_[i + 1] - offsets_[i]);
  }
  std::size_t offset(std::size_t i) const { return offsets_[i]; }
  std::size_t degree(std::size_t i) const { return offsets_[i + 1] - offsets_[i]; }
  // Index of the opposite orientation of directed edge e.
  std::size_t reverse(std::size_t e) const { return reverse_[e]; }
  double bandwidth() const { return bandwidth_; }
  std::size_t k() const { return k_; }
  WeightScheme scheme() const { return scheme_; }

  std::size_t find_edge(std::size_t i, std::size_t j) const {
    auto nb = neighbors(i);
    auto it = std::lower_bound(nb.begin(), nb.end(), j, [](const Edge& e, std::size_t v) { return e.dst < v; });
    require(it != nb.end() && it->dst == j, ErrorKind::InvalidConfig, "edge (", i, ",", j, ") not present");
    return offsets_[i] + static_cast<std::size_t>(it - nb.begin());
  }

  bool connected() const {
    if (n_ == 0) return true;
    std::vector<char> seen(n_, 0);
    std::queue<std::size_t> todo;
    todo.push(0);
    seen[0] = 1;
    std::size_t count = 1;
    while (!todo.empty()) {
      const std::size_t i = todo.front();
      todo.pop();
      for (const auto& e : neighbors(i))
        if (!seen[e.dst]) {
          seen[e.dst] = 1;
          ++count;
          todo.push(e.dst);
        }
    }
    return count == n_;
  }

  // Checks the structural invariants; throws on violation.
  void validate() const {
    for (std::size_t e = 0; e < edges_.size(); ++e) {
      const auto& a = edges_[e];
      const auto& b = edges_[reverse_[e]];
      require(a.src != a.dst, ErrorKind::InvalidConfig, "self-loop at ", a.src);
      require(b.src == a.dst && b.dst == a.src, ErrorKind::InvalidConfig, "edge list not orientation-closed");
      require(a.weight > 0.0 && std::abs(a.weight - b.weight) <= 1e-12, ErrorKind::InvalidConfig,
              "edge weights must be positive and symmetric");
    }
    for (std::size_t i = 0; i < n_; ++i) require(degree(i) >= 1, ErrorKind::InvalidConfig, "node ", i, " is isolated");
  }

 private:
  std::size_t n_ = 0;
  std::vector<Edge> edges_;
  std::vector<std::size_t> offsets_;
  std::vector<std::size_t> reverse_;
  double bandwidth_ = 0.0;
  std::size_t k_ = 0;
  WeightScheme scheme_ = WeightScheme::Binary;
};

// Brute-force kNN (ties by smaller index), union-symmetrized. Gaussian weights
// use bandwidth h = median Euclidean length of the undirected kNN edges;
// distance-0 pairs get weight 1.
inline Graph build_knn(const Matrix& X, std::size_t k, WeightScheme scheme = WeightScheme::Gaussian) {
  const auto n = static_cast<std::size_t>(X.rows());
  require(n >= 2, ErrorKind::InvalidConfig, "build_knn needs n >= 2, got ", n);
  require(k >= 1 && k < n, ErrorKind::InvalidConfig, "build_knn needs 1 <= k < n, got k=", k, " n=", n);

  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  pairs.reserve(n * k);
  std::vector<std::pair<double, std::size_t>> cand(n - 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t c = 0;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      cand[c++] = {(X.row(static_cast<Eigen::Index>(i)) - X.row(static_cast<Eigen::Index>(j))).squaredNorm(), j};
    }
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
    for (std::size_t t = 0; t < k; ++t) pairs.emplace_back(std::min(i, cand[t].second), std::max(i, cand[t].second));
  }
  std::sort(pairs.begin(), pairs.end());
  pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());

  std::vector<double> d2(pairs.size());
  for (std::size_t p = 0; p < pairs.size(); ++p)
    d2[p] = (X.row(static_cast<Eigen::Index>(pairs[p].first)) - X.row(static_cast<Eigen::Index>(pairs[p].second))).squaredNorm();

  double h = 0.0;
  if (!d2.empty()) {
    std::vector<double> lens(d2.size());
    for (std::size_t p = 0; p < d2.size(); ++p) lens[p] = std::sqrt(d2[p]);
    const std::size_t mid = lens.size() / 2;
    std::nth_element(lens.begin(), lens.begin() + static_cast<std::ptrdiff_t>(mid), lens.end());
    h = lens[mid];
    if (lens.size() % 2 == 0) {
      const double lo = *std::max_element(lens.begin(), lens.begin() + static_cast<std::ptrdiff_t>(mid));
      h = 0.5 * (h + lo);
    }
  }

  std::vector<Edge> und;
  und.reserve(pairs.size());
  for (std::size_t p = 0; p < pairs.size(); ++p) {
    double w = 1.0;
    if (scheme == WeightScheme::Gaussian && h > 0.0) w = std::exp(-d2[p] / (2.0 * h * h));
    // exp underflow would produce a zero weight; keep edges strictly positive.
    w = std::max(w, 1e-300);
    und.push_back({pairs[p].first, pairs[p].second, w});
  }
  return Graph::from_undirected(n, und, h, k, scheme);
}

struct DegreeStats {
  std::size_t min = 0;
  std::size_t max = 0;
  double mean = 0.0;
};

inline DegreeStats degree_stats(const Graph& g) {
  DegreeStats s;
  if (g.n() == 0) return s;
  s.min = g.degree(0);
  for (std::size_t i = 0; i < g.n(); ++i) {
    s.min = std::min(s.min, g.degree(i));
    s.max = std::max(s.max, g.degree(i));
  }
  s.mean = static_cast<double>(g.num_directed_edges()) / static_cast<double>(g.n());
  return s;
}

// Undirected edge dump: a metadata comment line then i,j,w rows (i < j).
inline void write_graph_csv(const Graph& g, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorKind::Io, "cannot write '", path, "'");
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", g.bandwidth());
  out << "# k=" << g.k() << " scheme=" << to_string(g.scheme()) << " bandwidth=" << buf << '\n';
  out << "i,j,w\n";
  for (const auto& e : g.edges()) {
    if (e.src >= e.dst) continue;
    std::snprintf(buf, sizeof buf, "%.17g", e.weight);
    out << e.src << ',' << e.dst << ',' << buf << '\n';
  }
}

}  // namespace gcdro
