#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "versreid/dataset.hpp"
#include "versreid/errors.hpp"
#include "versreid/logging.hpp"
#include "versreid/tensor.hpp"

namespace versreid {

struct RetrievalItem {
  std::size_t identity = 0;
  std::size_t camera = 0;
};

// Plain Euclidean distances; callers normalize features first so the metric
// is monotone in cosine similarity.
inline TensorT<float> pairwise_distance_matrix(const TensorT<float>& queries,
                                               const TensorT<float>& gallery) {
  detail::check(queries.rank() == 2 && gallery.rank() == 2, "pairwise: feature matrices must be rank 2");
  if (queries.cols() != gallery.cols()) {
    throw std::runtime_error("pairwise: feature dimensions differ, " +
                             detail::shape_str(queries.shape()) + " vs " +
                             detail::shape_str(gallery.shape()));
  }
  const std::size_t q = queries.rows(), g = gallery.rows(), d = queries.cols();
  auto out = TensorT<float>::zeros({q, g}, false);
  for (std::size_t i = 0; i < q; ++i) {
    for (std::size_t j = 0; j < g; ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = static_cast<double>(queries.at(i * d + k)) - gallery.at(j * d + k);
        acc += diff * diff;
      }
      out.data()[i * g + j] = static_cast<float>(std::sqrt(acc));
    }
  }
  return out;
}

struct CmcMapResult {
  std::vector<double> cmc;  // cmc[k-1] = fraction of queries matched by rank k
  double map = 0.0;
  std::size_t evaluated = 0;
  std::size_t skipped = 0;

  double rank_at(std::size_t k) const {
    if (cmc.empty() || k == 0) return 0.0;
    return cmc[std::min(k, cmc.size()) - 1];
  }
};

// Same-identity same-camera gallery entries are excluded per query; the rest
// sort ascending by (distance, gallery index). Queries left with no relevant
// entry are skipped and counted.
inline CmcMapResult evaluate_cmc_map(const TensorT<float>& dists,
                                     const std::vector<RetrievalItem>& query,
                                     const std::vector<RetrievalItem>& gallery) {
  detail::check(dists.rank() == 2, "evaluate: distance matrix must be rank 2");
  detail::check(dists.rows() == query.size(), "evaluate: query count mismatch");
  detail::check(dists.cols() == gallery.size(), "evaluate: gallery count mismatch");

  CmcMapResult res;
  std::vector<std::size_t> first_ranks;
  double ap_sum = 0.0;
  std::size_t max_valid = 0;

  for (std::size_t q = 0; q < query.size(); ++q) {
    std::vector<std::pair<float, std::size_t>> order;
    order.reserve(gallery.size());
    bool any_relevant = false;
    for (std::size_t g = 0; g < gallery.size(); ++g) {
      const bool same_id = gallery[g].identity == query[q].identity;
      if (same_id && gallery[g].camera == query[q].camera) continue;
      order.push_back({dists.at(q * gallery.size() + g), g});
      any_relevant |= same_id;
    }
    if (!any_relevant) {
      ++res.skipped;
      continue;
    }
    std::sort(order.begin(), order.end());
    max_valid = std::max(max_valid, order.size());

    std::size_t relevant_seen = 0;
    std::size_t first_rank = 0;
    std::size_t total_relevant = 0;
    double ap = 0.0;
    for (std::size_t r = 0; r < order.size(); ++r) {
      if (gallery[order[r].second].identity == query[q].identity) {
        ++relevant_seen;
        if (first_rank == 0) first_rank = r + 1;
        ap += static_cast<double>(relevant_seen) / static_cast<double>(r + 1);
        ++total_relevant;
      }
    }
    ap_sum += ap / static_cast<double>(total_relevant);
    first_ranks.push_back(first_rank);
    ++res.evaluated;
  }

  if (res.evaluated > 0) {
    res.map = ap_sum / static_cast<double>(res.evaluated);
    res.cmc.assign(max_valid, 0.0);
    for (std::size_t rank : first_ranks) {
      for (std::size_t k = rank; k <= max_valid; ++k) res.cmc[k - 1] += 1.0;
    }
    for (double& v : res.cmc) v /= static_cast<double>(res.evaluated);
  }
  return res;
}

struct EvalRow {
  std::string dataset;
  double rank1 = 0.0;
  double rank5 = 0.0;
  double map = 0.0;
  std::size_t num_query = 0;  // queries that entered the metrics
  std::size_t num_gallery = 0;
};

struct EvalReport {
  std::vector<EvalRow> rows;
  std::string branch;
  std::string checkpoint;
  std::uint64_t seed = 0;
  std::size_t skipped_queries = 0;
};

// One side of an evaluation: extracted features plus identity/camera labels
// and the scene tags used for per-scene rows.
struct EvalSet {
  TensorT<float> feats;  // N x D
  std::vector<RetrievalItem> items;
  std::vector<Scene> scenes;
};

namespace detail {

inline TensorT<float> select_rows(const TensorT<float>& feats, const std::vector<std::size_t>& rows) {
  const std::size_t d = feats.cols();
  auto out = TensorT<float>::zeros({rows.size(), d}, false);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t k = 0; k < d; ++k) out.data()[i * d + k] = feats.at(rows[i] * d + k);
  }
  return out;
}

inline EvalRow make_row(const std::string& name, const CmcMapResult& res, std::size_t num_gallery) {
  EvalRow row;
  row.dataset = name;
  row.rank1 = res.rank_at(1);
  row.rank5 = res.rank_at(5);
  row.map = res.map;
  row.num_query = res.evaluated;
  row.num_gallery = num_gallery;
  return row;
}

}  // namespace detail

// Per-scene rows over each scene's own query/gallery pair, then one joint row
// over the full union. The joint row is a fresh evaluation, never an average.
inline EvalReport joint_evaluate(const EvalSet& query, const EvalSet& gallery) {
  detail::check(query.feats.rank() == 2 && gallery.feats.rank() == 2,
                "joint_evaluate: features must be rank 2");
  detail::check(query.feats.rows() == query.items.size() && query.items.size() == query.scenes.size(),
                "joint_evaluate: query sizes mismatch");
  detail::check(gallery.feats.rows() == gallery.items.size() &&
                    gallery.items.size() == gallery.scenes.size(),
                "joint_evaluate: gallery sizes mismatch");

  auto qn = l2_normalize_rows<float>(nullptr, query.feats);
  auto gn = l2_normalize_rows<float>(nullptr, gallery.feats);

  EvalReport report;
  for (std::size_t s = 0; s < kNumScenes; ++s) {
    const Scene scene = static_cast<Scene>(s);
    std::vector<std::size_t> q_rows, g_rows;
    for (std::size_t i = 0; i < query.scenes.size(); ++i) {
      if (query.scenes[i] == scene) q_rows.push_back(i);
    }
    for (std::size_t i = 0; i < gallery.scenes.size(); ++i) {
      if (gallery.scenes[i] == scene) g_rows.push_back(i);
    }
    if (q_rows.empty()) continue;
    std::vector<RetrievalItem> q_items, g_items;
    for (auto i : q_rows) q_items.push_back(query.items[i]);
    for (auto i : g_rows) g_items.push_back(gallery.items[i]);
    auto dists = pairwise_distance_matrix(detail::select_rows(qn, q_rows),
                                          detail::select_rows(gn, g_rows));
    auto res = evaluate_cmc_map(dists, q_items, g_items);
    if (res.skipped > 0) {
      warn("eval: " + std::to_string(res.skipped) + " queries had no valid gallery match in " +
           scene_name(scene));
    }
    report.skipped_queries += res.skipped;
    report.rows.push_back(detail::make_row(scene_name(scene), res, g_rows.size()));
  }

  auto joint_dists = pairwise_distance_matrix(qn, gn);
  auto joint = evaluate_cmc_map(joint_dists, query.items, gallery.items);
  if (joint.skipped > 0) {
    warn("eval: " + std::to_string(joint.skipped) + " queries had no valid gallery match in joint");
  }
  report.skipped_queries += joint.skipped;
  report.rows.push_back(detail::make_row("joint", joint, gallery.items.size()));
  return report;
}

inline std::string report_json_lines(const EvalReport& report) {
  std::string out;
  for (const auto& row : report.rows) {
    nlohmann::json obj;
    obj["dataset"] = row.dataset;
    obj["rank1"] = row.rank1;
    obj["rank5"] = row.rank5;
    obj["map"] = row.map;
    obj["num_query"] = row.num_query;
    obj["num_gallery"] = row.num_gallery;
    obj["branch"] = report.branch;
    obj["checkpoint"] = report.checkpoint;
    obj["seed"] = report.seed;
    out += obj.dump();
    out += "\n";
  }
  return out;
}

inline void write_report(const EvalReport& report, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("report: cannot open for writing: " + path);
  out << report_json_lines(report);
  if (!out) throw DataError("report: write failed: " + path);
}

}  // namespace versreid
