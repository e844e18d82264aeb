#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "voxseg/error.hpp"
#include "voxseg/grid.hpp"
#include "voxseg/volume.hpp"

namespace voxseg::metrics {

namespace detail {

inline void require_aligned(const Mask& a, const Mask& b) {
  if (!a.same_geometry(b))
    throw ValidationError("masks have mismatched geometry: " + index_to_string(a.shape()) + " vs " +
                          index_to_string(b.shape()));
}

struct OverlapCounts {
  std::size_t pred = 0, gold = 0, both = 0;
};

inline OverlapCounts overlap(const Mask& pred, const Mask& gold) {
  require_aligned(pred, gold);
  OverlapCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, g = gold[i] != 0;
    c.pred += p;
    c.gold += g;
    c.both += p && g;
  }
  return c;
}

// mask voxels with at least one six-neighbor outside the mask
inline std::vector<Index3> surface_voxels(const Mask& m) {
  static constexpr int kNb[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
  std::vector<Index3> out;
  const Index3 s = m.shape();
  for (int x = 0; x < s[0]; ++x)
    for (int y = 0; y < s[1]; ++y)
      for (int z = 0; z < s[2]; ++z) {
        if (m(x, y, z) == 0) continue;
        bool boundary = false;
        for (const auto& n : kNb) {
          const int nx = x + n[0], ny = y + n[1], nz = z + n[2];
          if (!m.contains(nx, ny, nz) || m(nx, ny, nz) == 0) {
            boundary = true;
            break;
          }
        }
        if (boundary) out.push_back({x, y, z});
      }
  return out;
}

inline double directed_hausdorff(const std::vector<Index3>& from, const std::vector<Index3>& to) {
  double worst = 0.0;
  for (const Index3& a : from) {
    double best = std::numeric_limits<double>::infinity();
    for (const Index3& b : to) {
      const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
      best = std::min(best, dx * dx + dy * dy + dz * dz);
      if (best == 0.0) break;
    }
    worst = std::max(worst, best);
  }
  return std::sqrt(worst);
}

}  // namespace detail

// 2|P∩G| / (|P|+|G|); two empty masks count as a perfect match.
inline double dsc(const Mask& pred, const Mask& gold) {
  const auto c = detail::overlap(pred, gold);
  if (c.pred + c.gold == 0) return 1.0;
  return 2.0 * static_cast<double>(c.both) / static_cast<double>(c.pred + c.gold);
}

// |P∩G| / |P|; an empty prediction makes no false claims, so PPV is 1.
inline double ppv(const Mask& pred, const Mask& gold) {
  const auto c = detail::overlap(pred, gold);
  if (c.pred == 0) return 1.0;
  return static_cast<double>(c.both) / static_cast<double>(c.pred);
}

// |P∩G| / |G|; an empty gold standard leaves nothing to miss.
inline double sensitivity(const Mask& pred, const Mask& gold) {
  const auto c = detail::overlap(pred, gold);
  if (c.gold == 0) return 1.0;
  return static_cast<double>(c.both) / static_cast<double>(c.gold);
}

struct HausdorffResult {
  double distance = 0.0;
  bool defined = false;
};

// Symmetric Hausdorff distance between mask surfaces in voxel index units.
// Undefined when either mask is empty.
inline HausdorffResult hausdorff(const Mask& pred, const Mask& gold) {
  detail::require_aligned(pred, gold);
  const auto sp = detail::surface_voxels(pred);
  const auto sg = detail::surface_voxels(gold);
  if (sp.empty() || sg.empty()) return {0.0, false};
  HausdorffResult r;
  r.defined = true;
  r.distance = std::max(detail::directed_hausdorff(sp, sg), detail::directed_hausdorff(sg, sp));
  return r;
}

struct Aggregate {
  double mean = 0.0;
  double stddev = 0.0;
};

inline Aggregate aggregate(const std::vector<double>& xs) {
  if (xs.empty()) throw ValidationError("cannot aggregate zero values");
  double s = 0.0, s2 = 0.0;
  for (const double x : xs) {
    s += x;
    s2 += x * x;
  }
  const double n = static_cast<double>(xs.size());
  Aggregate a;
  a.mean = s / n;
  a.stddev = std::sqrt(std::max(0.0, s2 / n - a.mean * a.mean));
  return a;
}

struct CaseMetrics {
  std::string case_id;
  double dsc = 0.0;
  double ppv = 0.0;
  double sensitivity = 0.0;
  double hd = 0.0;
  std::vector<std::string> flags;

  bool operator==(const CaseMetrics&) const = default;
};

struct EvaluationReport {
  std::vector<CaseMetrics> rows;
  double hd_max = 200.0;

  Aggregate dsc_aggregate() const { return column([](const CaseMetrics& r) { return r.dsc; }); }
  Aggregate ppv_aggregate() const { return column([](const CaseMetrics& r) { return r.ppv; }); }
  Aggregate sensitivity_aggregate() const {
    return column([](const CaseMetrics& r) { return r.sensitivity; });
  }
  Aggregate hd_aggregate() const { return column([](const CaseMetrics& r) { return r.hd; }); }

  void write_csv(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open '" + path + "' for writing");
    f << "case_id,dsc,ppv,sensitivity,hd,flags\n";
    // Shortest representation that parses back to the same double.
    const auto num = [](double v) {
      char buf[32];
      const auto r = std::to_chars(buf, buf + sizeof(buf), v);
      return std::string(buf, r.ptr);
    };
    for (const CaseMetrics& r : rows) {
      if (r.case_id.find(',') != std::string::npos || r.case_id.find('\n') != std::string::npos)
        throw ValidationError("case id '" + r.case_id + "' cannot be written to CSV");
      f << r.case_id << ',' << num(r.dsc) << ',' << num(r.ppv) << ',' << num(r.sensitivity) << ','
        << num(r.hd) << ',';
      for (std::size_t i = 0; i < r.flags.size(); ++i) f << (i ? ";" : "") << r.flags[i];
      f << '\n';
    }
    if (!f.good()) throw IoError("failed while writing '" + path + "'");
  }

  static EvaluationReport read_csv(const std::string& path, double hd_max = 200.0) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(f, line) || line != "case_id,dsc,ppv,sensitivity,hd,flags")
      throw IoError("'" + path + "' is not an evaluation report CSV");
    EvaluationReport rep;
    rep.hd_max = hd_max;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      std::stringstream ss(line);
      std::string field;
      CaseMetrics r;
      std::getline(ss, r.case_id, ',');
      auto num = [&](double& dst) {
        if (!std::getline(ss, field, ',')) throw IoError("short row in '" + path + "'");
        dst = std::stod(field);
      };
      num(r.dsc);
      num(r.ppv);
      num(r.sensitivity);
      num(r.hd);
      std::string flags;
      std::getline(ss, flags, ',');
      std::stringstream fs(flags);
      while (std::getline(fs, field, ';'))
        if (!field.empty()) r.flags.push_back(field);
      rep.rows.push_back(std::move(r));
    }
    return rep;
  }

  nlohmann::json to_json() const {
    nlohmann::json rows_j = nlohmann::json::array();
    for (const CaseMetrics& r : rows)
      rows_j.push_back({{"case_id", r.case_id},
                        {"dsc", r.dsc},
                        {"ppv", r.ppv},
                        {"sensitivity", r.sensitivity},
                        {"hd", r.hd},
                        {"flags", r.flags}});
    auto agg = [](const Aggregate& a) { return nlohmann::json{{"mean", a.mean}, {"stddev", a.stddev}}; };
    return {{"cases", std::move(rows_j)},
            {"hd_max", hd_max},
            {"aggregates",
             {{"dsc", agg(dsc_aggregate())},
              {"ppv", agg(ppv_aggregate())},
              {"sensitivity", agg(sensitivity_aggregate())},
              {"hd", agg(hd_aggregate())}}}};
  }

 private:
  template <typename F>
  Aggregate column(F&& get) const {
    std::vector<double> xs;
    xs.reserve(rows.size());
    for (const CaseMetrics& r : rows) xs.push_back(get(r));
    return aggregate(xs);
  }
};

// Per-case DSC/PPV/sensitivity/HD. An undefined HD (either mask empty) is
// reported as hd_max and flagged so downstream averages stay auditable.
inline EvaluationReport evaluate_cases(const std::vector<std::string>& case_ids,
                                       const std::vector<Mask>& preds, const std::vector<Mask>& golds,
                                       double hd_max = 200.0) {
  if (case_ids.size() != preds.size() || preds.size() != golds.size())
    throw ValidationError("evaluate_cases requires equally long id, prediction, and gold lists");
  if (case_ids.empty()) throw ValidationError("evaluate_cases requires at least one case");
  if (!(hd_max > 0.0)) throw ValidationError("hd_max must be > 0");

  EvaluationReport rep;
  rep.hd_max = hd_max;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    CaseMetrics r;
    r.case_id = case_ids[i];
    r.dsc = dsc(preds[i], golds[i]);
    r.ppv = ppv(preds[i], golds[i]);
    r.sensitivity = sensitivity(preds[i], golds[i]);
    const HausdorffResult h = hausdorff(preds[i], golds[i]);
    if (h.defined) {
      r.hd = h.distance;
    } else {
      r.hd = hd_max;
      r.flags.push_back("hd_undefined");
    }
    bool pred_empty = true, gold_empty = true;
    for (std::size_t v = 0; v < preds[i].size() && (pred_empty || gold_empty); ++v) {
      pred_empty = pred_empty && preds[i][v] == 0;
      gold_empty = gold_empty && golds[i][v] == 0;
    }
    if (pred_empty) r.flags.push_back("empty_prediction");
    if (gold_empty) r.flags.push_back("empty_gold");
    rep.rows.push_back(std::move(r));
  }
  return rep;
}

}  // namespace voxseg::metrics
