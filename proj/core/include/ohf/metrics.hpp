#pragma once

// Retrieval evaluation (Euclidean distance matrix, single-query CMC / mAP),
// Jensen-Shannon attention-similarity analysis across attention orders, and
// the analytic score-cost comparison between full and shared score modes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ohf/attention.hpp"
#include "ohf/data.hpp"
#include "ohf/errors.hpp"
#include "ohf/model.hpp"
#include "ohf/parallel.hpp"
#include "ohf/tensor.hpp"

namespace ohf {

// ---------------------------------------------------------------------------
// Embedding a dataset
// ---------------------------------------------------------------------------

struct EmbeddedSet {
  Tensor<float> embeddings;  // [N, (1 + parts) * width]
  std::vector<int> pids;
  std::vector<int> cams;
};

// Runs every image through the model in eval mode (no gradients, batch norm
// uses running statistics). Batching is a throughput knob only: results are
// identical for any batch size because BN statistics are frozen.
inline EmbeddedSet embed_dataset(const Dataset& ds, ModelParams<float>& mp, const ModelConfig& cfg,
                                 int batch_size = 16) {
  if (ds.items.empty()) fail_data("cannot embed an empty dataset");
  if (batch_size < 1) fail_config("batch size must be positive");
  NoGradGuard ng;
  EmbeddedSet out;
  std::vector<float> all;
  int dim = 0;
  for (std::size_t start = 0; start < ds.items.size(); start += static_cast<std::size_t>(batch_size)) {
    const std::size_t stop = std::min(ds.items.size(), start + static_cast<std::size_t>(batch_size));
    std::vector<int> picks;
    for (std::size_t i = start; i < stop; ++i) picks.push_back(static_cast<int>(i));
    Rng unused(0);  // no augmentation: the stream is never consulted
    auto batch = make_batch(ds, picks, unused, nullptr);
    auto emb = embed(batch, mp, cfg);
    dim = emb.extent(1);
    all.insert(all.end(), emb.values().begin(), emb.values().end());
  }
  out.embeddings = Tensor<float>::from_values({static_cast<int>(ds.items.size()), dim}, std::move(all));
  for (const auto& item : ds.items) {
    out.pids.push_back(item.pid);
    out.cams.push_back(item.cam);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Distance matrix and single-query CMC / mAP
// ---------------------------------------------------------------------------

// Pairwise Euclidean distances between two embedding sets: [Nq, Ng].
inline Tensor<float> dist_matrix(const Tensor<float>& q, const Tensor<float>& g) {
  if (q.dim() != 2 || g.dim() != 2) fail_dim("dist_matrix expects [N, D] inputs");
  if (q.extent(1) != g.extent(1))
    fail_dim("embedding widths differ: " + std::to_string(q.extent(1)) + " vs " + std::to_string(g.extent(1)));
  const int nq = q.extent(0), ng = g.extent(0), d = q.extent(1);
  std::vector<float> out(static_cast<std::size_t>(nq) * ng);
  const float* pq = q.data();
  const float* pg = g.data();
  parallel_for(nq, [&](std::int64_t lo, std::int64_t hi) {
    for (std::int64_t i = lo; i < hi; ++i)
      for (int j = 0; j < ng; ++j) {
        double s = 0;
        for (int k = 0; k < d; ++k) {
          const double e = static_cast<double>(pq[i * d + k]) - static_cast<double>(pg[j * d + k]);
          s += e * e;
        }
        out[static_cast<std::size_t>(i) * ng + j] = static_cast<float>(std::sqrt(s));
      }
  });
  return Tensor<float>::from_values({nq, ng}, std::move(out));
}

struct CmcResult {
  std::vector<double> cmc;  // cmc[k-1] = fraction of evaluated queries with a hit in the top k
  double mean_ap = 0.0;
  int evaluated = 0;  // queries with at least one valid positive
  int skipped = 0;    // queries whose positives were all excluded

  double rank(int k) const {
    if (cmc.empty()) return 0.0;
    const int idx = std::min<int>(k, static_cast<int>(cmc.size())) - 1;
    return cmc[static_cast<std::size_t>(std::max(idx, 0))];
  }
};

// Single-query protocol: for each query, gallery entries sharing BOTH its
// identity and its camera are excluded from the ranking; equal distances are
// broken by gallery index. AP is the mean of precision at each positive's
// rank; queries with no valid positive are skipped but counted.
inline CmcResult cmc_map(const Tensor<float>& dist, const std::vector<int>& q_pids, const std::vector<int>& q_cams,
                         const std::vector<int>& g_pids, const std::vector<int>& g_cams) {
  if (dist.dim() != 2) fail_dim("cmc_map expects a [Nq, Ng] distance matrix");
  const int nq = dist.extent(0), ng = dist.extent(1);
  if (static_cast<int>(q_pids.size()) != nq || static_cast<int>(q_cams.size()) != nq)
    fail_dim("query label count does not match the distance matrix");
  if (static_cast<int>(g_pids.size()) != ng || static_cast<int>(g_cams.size()) != ng)
    fail_dim("gallery label count does not match the distance matrix");

  CmcResult res;
  std::vector<double> first_hit(static_cast<std::size_t>(ng), 0.0);
  double ap_sum = 0.0;
  for (int i = 0; i < nq; ++i) {
    std::vector<std::pair<float, int>> order;
    order.reserve(static_cast<std::size_t>(ng));
    for (int j = 0; j < ng; ++j) {
      if (g_pids[static_cast<std::size_t>(j)] == q_pids[static_cast<std::size_t>(i)] &&
          g_cams[static_cast<std::size_t>(j)] == q_cams[static_cast<std::size_t>(i)])
        continue;  // same identity seen by the same camera: excluded
      order.emplace_back(dist.values()[static_cast<std::size_t>(i) * ng + j], j);
    }
    std::sort(order.begin(), order.end());  // ties fall back to the gallery index

    int positives_seen = 0, first_rank = 0;
    double ap = 0.0;
    for (std::size_t r = 0; r < order.size(); ++r)
      if (g_pids[static_cast<std::size_t>(order[r].second)] == q_pids[static_cast<std::size_t>(i)]) {
        ++positives_seen;
        if (positives_seen == 1) first_rank = static_cast<int>(r) + 1;
        ap += static_cast<double>(positives_seen) / static_cast<double>(r + 1);
      }
    if (positives_seen == 0) {
      ++res.skipped;
      continue;
    }
    ++res.evaluated;
    ap_sum += ap / positives_seen;
    first_hit[static_cast<std::size_t>(first_rank - 1)] += 1.0;
  }
  if (res.evaluated == 0) fail_data("no query has a valid positive in the gallery: evaluation is undefined");

  res.cmc.resize(static_cast<std::size_t>(ng));
  double cum = 0.0;
  for (int k = 0; k < ng; ++k) {
    cum += first_hit[static_cast<std::size_t>(k)];
    res.cmc[static_cast<std::size_t>(k)] = cum / res.evaluated;
  }
  res.mean_ap = ap_sum / res.evaluated;
  return res;
}

// ---------------------------------------------------------------------------
// Jensen-Shannon divergence
// ---------------------------------------------------------------------------

// JS(p, q) = KL(p||m)/2 + KL(q||m)/2 with m = (p+q)/2, natural log, and the
// convention 0*ln 0 = 0. Symmetric by construction and bounded by ln 2.
inline double js_divergence(const std::vector<double>& p, const std::vector<double>& q) {
  if (p.size() != q.size()) fail_contract("js_divergence needs equal-length distributions");
  double sp = 0, sq = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] < 0 || q[i] < 0) fail_contract("distributions must be nonnegative");
    sp += p[i];
    sq += q[i];
  }
  if (std::fabs(sp - 1.0) > 1e-5 || std::fabs(sq - 1.0) > 1e-5)
    fail_contract("distributions must sum to 1 (got " + std::to_string(sp) + " and " + std::to_string(sq) + ")");
  double js = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double m = (p[i] + q[i]) / 2.0;
    const double a = p[i] > 0 ? p[i] * std::log(p[i] / m) : 0.0;
    const double b = q[i] > 0 ? q[i] * std::log(q[i] / m) : 0.0;
    js += 0.5 * (a + b);
  }
  return std::max(js, 0.0);
}

// ---------------------------------------------------------------------------
// Cross-order attention similarity
// ---------------------------------------------------------------------------

enum class PoolDirection { Down, Up };

inline std::string pool_direction_name(PoolDirection d) { return d == PoolDirection::Down ? "down" : "up"; }

namespace detail {

// Center-pick nearest-neighbor source index when resampling src_n -> dst_n.
inline int nn_index(int t, int dst_n, int src_n) {
  return std::min(src_n - 1, static_cast<int>((static_cast<std::int64_t>(2 * t + 1) * src_n) / (2 * dst_n)));
}

inline std::vector<double> renormalized(std::vector<double> row) {
  double s = 0;
  for (double v : row) s += v;
  if (s <= 0) fail_numeric("attention row lost all probability mass");
  for (double& v : row) v /= s;
  return row;
}

}  // namespace detail

// Row-normalized spatial attention rows of one record. High orders carry no
// class token; for order 1 the class row and column are dropped and each
// remaining row renormalized, so every order lives on its token grid alone.
inline std::vector<std::vector<double>> spatial_attention_rows(const AttentionRecord<float>& rec) {
  const int t = rec.weights.extent(0);
  const int skip = rec.order == 1 ? 1 : 0;
  const int n = t - skip;
  std::vector<std::vector<double>> rows;
  rows.reserve(static_cast<std::size_t>(n));
  for (int q = 0; q < n; ++q) {
    std::vector<double> row(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k)
      row[static_cast<std::size_t>(k)] =
          static_cast<double>(rec.weights.values()[static_cast<std::size_t>(q + skip) * t + (k + skip)]);
    rows.push_back(detail::renormalized(std::move(row)));
  }
  return rows;
}

namespace detail {

// Mean row-wise JS between a fine attention matrix and a coarse one.
// Down: pool the fine matrix onto the coarse grid (block-mean over keys via
// the floor map, query rows picked by center nearest neighbor), compare on
// the coarse domain. Up: replicate coarse rows onto the fine grid and compare
// there. Equal grids compare directly.
inline double cross_grid_js(const std::vector<std::vector<double>>& fine, int fh, int fw,
                            const std::vector<std::vector<double>>& coarse, int ch, int cw, PoolDirection dir) {
  const int nf = fh * fw, nc = ch * cw;
  if (nf == nc) {
    double acc = 0;
    for (int q = 0; q < nf; ++q)
      acc += js_divergence(fine[static_cast<std::size_t>(q)], coarse[static_cast<std::size_t>(q)]);
    return acc / nf;
  }

  // Fine key cell -> coarse block, shared by both directions.
  std::vector<int> kmap(static_cast<std::size_t>(nf));
  std::vector<int> cnt(static_cast<std::size_t>(nc), 0);
  for (int y = 0; y < fh; ++y)
    for (int x = 0; x < fw; ++x) {
      const int j = coarse_index(y, fh, ch) * cw + coarse_index(x, fw, cw);
      kmap[static_cast<std::size_t>(y * fw + x)] = j;
      cnt[static_cast<std::size_t>(j)]++;
    }

  double acc = 0;
  if (dir == PoolDirection::Down) {
    for (int cy = 0; cy < ch; ++cy)
      for (int cx = 0; cx < cw; ++cx) {
        const int q = cy * cw + cx;
        const auto& src = fine[static_cast<std::size_t>(nn_index(cy, ch, fh) * fw + nn_index(cx, cw, fw))];
        std::vector<double> pooled(static_cast<std::size_t>(nc), 0.0);
        for (int k = 0; k < nf; ++k) pooled[static_cast<std::size_t>(kmap[static_cast<std::size_t>(k)])] += src[static_cast<std::size_t>(k)];
        for (int k = 0; k < nc; ++k) pooled[static_cast<std::size_t>(k)] /= cnt[static_cast<std::size_t>(k)];
        acc += js_divergence(renormalized(std::move(pooled)), coarse[static_cast<std::size_t>(q)]);
      }
    return acc / nc;
  }
  for (int fy = 0; fy < fh; ++fy)
    for (int fx = 0; fx < fw; ++fx) {
      const int q = fy * fw + fx;
      const auto& src = coarse[static_cast<std::size_t>(coarse_index(fy, fh, ch) * cw + coarse_index(fx, fw, cw))];
      std::vector<double> spread(static_cast<std::size_t>(nf));
      for (int k = 0; k < nf; ++k) spread[static_cast<std::size_t>(k)] = src[static_cast<std::size_t>(kmap[static_cast<std::size_t>(k)])];
      acc += js_divergence(renormalized(std::move(spread)), fine[static_cast<std::size_t>(q)]);
    }
  return acc / nf;
}

}  // namespace detail

struct SimilarityReport {
  int layer = -1;
  PoolDirection direction = PoolDirection::Down;
  std::vector<int> orders;  // ascending; index into the matrices below
  int heads = 0;
  std::vector<double> mean_js;               // orders.size()^2, head-averaged
  std::vector<std::vector<double>> head_js;  // per head, same layout

  double at(int i, int j) const { return mean_js[static_cast<std::size_t>(i) * orders.size() + j]; }
};

// Compares every pair of attention orders captured from one layer of one
// forward pass. grid_h/grid_w is the first-order token grid; each record's
// grid is found by walking the ceil-halving chain until token counts match.
inline SimilarityReport attention_similarity_report(const std::vector<AttentionRecord<float>>& records, int grid_h,
                                                    int grid_w, PoolDirection direction) {
  if (records.empty()) fail_contract("similarity analysis needs at least one attention record");
  SimilarityReport rep;
  rep.layer = records.front().layer;
  rep.direction = direction;

  std::map<int, std::map<int, const AttentionRecord<float>*>> by_order;
  for (const auto& r : records) {
    if (r.layer != rep.layer)
      fail_contract("attention records mix layers " + std::to_string(rep.layer) + " and " + std::to_string(r.layer) +
                    "; analyze one layer at a time");
    by_order[r.order][r.head] = &r;
  }
  for (const auto& [order, heads] : by_order) rep.orders.push_back(order);
  rep.heads = static_cast<int>(by_order.begin()->second.size());
  for (const auto& [order, heads] : by_order)
    if (static_cast<int>(heads.size()) != rep.heads)
      fail_contract("order " + std::to_string(order) + " captured a different head count");

  // Possible token grids: the first-order grid and its repeated halvings.
  std::vector<std::pair<int, int>> chain{{grid_h, grid_w}};
  while (chain.back().first > 1 || chain.back().second > 1)
    chain.emplace_back((chain.back().first + 1) / 2, (chain.back().second + 1) / 2);
  auto grid_of = [&](int tokens) -> std::pair<int, int> {
    for (const auto& [h, w] : chain)
      if (h * w == tokens) return {h, w};
    fail_contract("attention matrix with " + std::to_string(tokens) + " tokens does not fit any halving of " +
                  std::to_string(grid_h) + "x" + std::to_string(grid_w));
  };

  const std::size_t m = rep.orders.size();
  rep.mean_js.assign(m * m, 0.0);
  rep.head_js.assign(static_cast<std::size_t>(rep.heads), std::vector<double>(m * m, 0.0));

  for (int h = 0; h < rep.heads; ++h) {
    // Cache the spatial rows and grid per order for this head.
    std::vector<std::vector<std::vector<double>>> rows(m);
    std::vector<std::pair<int, int>> grids(m);
    for (std::size_t i = 0; i < m; ++i) {
      const auto* rec = by_order[rep.orders[i]].at(h);
      rows[i] = spatial_attention_rows(*rec);
      grids[i] = grid_of(static_cast<int>(rows[i].size()));
    }
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = i + 1; j < m; ++j) {
        // The earlier order never has fewer tokens than the later one.
        const double js = detail::cross_grid_js(rows[i], grids[i].first, grids[i].second, rows[j], grids[j].first,
                                                grids[j].second, direction);
        rep.head_js[static_cast<std::size_t>(h)][i * m + j] = js;
        rep.head_js[static_cast<std::size_t>(h)][j * m + i] = js;
      }
  }
  for (std::size_t c = 0; c < m * m; ++c) {
    double s = 0;
    for (int h = 0; h < rep.heads; ++h) s += rep.head_js[static_cast<std::size_t>(h)][c];
    rep.mean_js[c] = s / rep.heads;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Score-computation cost (multiply-adds), full vs shared
// ---------------------------------------------------------------------------

// Per batch element, for one high order with n tokens at width d:
// two [n,d]x[d,d] projections plus the scaled [n,dh]x[dh,n] product per head.
inline std::int64_t full_score_madds(std::int64_t n, std::int64_t d) { return 2 * n * d * d + n * n * d; }

// Per batch element: pooling the first-order spatial scores (n1 tokens) reads
// each source entry once per pass (n1^2 + n*n1 per head), then the learned
// prior applies as an [n,n]x[n,n] product per head.
inline std::int64_t shared_score_madds(std::int64_t n1, std::int64_t n, std::int64_t heads) {
  return heads * (n1 * n1 + n * n1) + heads * n * n * n;
}

struct FlopRow {
  int layer = -1;
  std::string mode;  // "full" or "shared"
  std::int64_t score_madds = 0;
};

// Analytic per-layer score cost under both modes (batch size 1). Layers whose
// order is 1 are omitted: both modes do identical first-order work.
inline std::vector<FlopRow> flops_report(const ModelConfig& cfg) {
  const auto [h1, w1] = stem_grid(cfg.input_h, cfg.input_w);
  const std::int64_t n1 = static_cast<std::int64_t>(h1) * w1;
  const auto branches = parse_lrp_branches(cfg.lrp_branches);
  const bool downsamples = !(branches.size() == 1 && branches[0] == LrpBranch::None);
  std::vector<FlopRow> rows;
  for (int layer = 0; layer < cfg.stack.layers; ++layer) {
    const int order = cfg.stack.order_at(layer);
    if (order < 2) continue;
    std::int64_t full = 0, shared = 0;
    int h = h1, w = w1;
    for (int o = 2; o <= order; ++o) {
      if (downsamples) {
        h = (h + 1) / 2;
        w = (w + 1) / 2;
      }
      const std::int64_t n = static_cast<std::int64_t>(h) * w;
      full += full_score_madds(n, cfg.stack.width);
      shared += shared_score_madds(n1, n, cfg.stack.heads);
    }
    rows.push_back({layer, "full", full});
    rows.push_back({layer, "shared", shared});
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

namespace detail {

inline std::ofstream open_report(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out.good()) fail_io("cannot write '" + path + "'");
  return out;
}

}  // namespace detail

inline void write_metrics_tsv(const std::string& path, const CmcResult& r) {
  auto out = detail::open_report(path);
  char buf[64];
  auto put = [&](const char* name, double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    out << name << '\t' << buf << '\n';
  };
  out << "metric\tvalue\n";
  put("mAP", r.mean_ap);
  put("rank1", r.rank(1));
  put("rank5", r.rank(5));
  put("rank10", r.rank(10));
  out << "evaluated\t" << r.evaluated << '\n';
  out << "skipped\t" << r.skipped << '\n';
  if (!out.good()) fail_io("failed while writing '" + path + "'");
}

// One row per (layer, order pair, direction); with per_head also one row per
// head, the averaged rows labeled "avg". The full matrix is emitted, diagonal
// included, so downstream plotting needs no symmetry bookkeeping.
inline void write_analysis_tsv(const std::string& path, const std::vector<SimilarityReport>& reports, bool per_head) {
  auto out = detail::open_report(path);
  out << "layer\torder_i\torder_j\tdirection\tmean_js";
  if (per_head) out << "\thead";
  out << '\n';
  char buf[64];
  for (const auto& rep : reports) {
    const std::size_t m = rep.orders.size();
    auto row = [&](int oi, int oj, double v, const std::string& head) {
      std::snprintf(buf, sizeof buf, "%.9g", v);
      out << rep.layer << '\t' << oi << '\t' << oj << '\t' << pool_direction_name(rep.direction) << '\t' << buf;
      if (per_head) out << '\t' << head;
      out << '\n';
    };
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) {
        row(rep.orders[i], rep.orders[j], rep.mean_js[i * m + j], "avg");
        if (per_head)
          for (int h = 0; h < rep.heads; ++h)
            row(rep.orders[i], rep.orders[j], rep.head_js[static_cast<std::size_t>(h)][i * m + j],
                std::to_string(h));
      }
  }
  if (!out.good()) fail_io("failed while writing '" + path + "'");
}

inline void write_flops_tsv(const std::string& path, const std::vector<FlopRow>& rows) {
  auto out = detail::open_report(path);
  out << "layer\tmode\tscore_madds\n";
  for (const auto& r : rows) out << r.layer << '\t' << r.mode << '\t' << r.score_madds << '\n';
  if (!out.good()) fail_io("failed while writing '" + path + "'");
}

}  // namespace ohf
