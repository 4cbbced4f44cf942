#include "elastoreg/evaluate.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace elastoreg::evaluate {

using nlohmann::json;

double rmse(const geometry::DisplacementField& pred,
            const geometry::DisplacementField& gt,
            const geometry::PointCloud& cloud, Subset subset) {
  if (pred.size() != gt.size() || pred.size() != cloud.size()) {
    throw std::invalid_argument("evaluate: rmse field length mismatch");
  }
  double acc = 0.0;
  int count = 0;
  for (int i = 0; i < pred.size(); ++i) {
    if (subset == Subset::Surface && !cloud.surface[i]) continue;
    acc += (pred.vectors.row(i) - gt.vectors.row(i)).squaredNorm();
    ++count;
  }
  if (count == 0) throw std::invalid_argument("evaluate: empty rmse subset");
  return std::sqrt(acc / static_cast<double>(count));
}

double ape(double ratio_pred, double ratio_gt) {
  if (ratio_gt == 0.0) {
    throw std::invalid_argument("evaluate: APE with zero ground truth");
  }
  return std::abs((ratio_pred - ratio_gt) / ratio_gt) * 100.0;
}

MeanStd mean_std(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("evaluate: empty sample");
  double mean = std::accumulate(values.begin(), values.end(), 0.0) /
                static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  var /= static_cast<double>(values.size());
  return {mean, std::sqrt(var)};
}

namespace {

// Exact null distribution of the positive-rank sum over all 2^n sign
// assignments, on doubled ranks so averaged tie ranks stay integral.
double exact_two_sided_p(const std::vector<int>& doubled_ranks, int w2_obs) {
  int total = std::accumulate(doubled_ranks.begin(), doubled_ranks.end(), 0);
  std::vector<double> count(total + 1, 0.0);
  count[0] = 1.0;
  for (int r : doubled_ranks) {
    for (int s = total; s >= r; --s) count[s] += count[s - r];
  }
  double all = std::ldexp(1.0, static_cast<int>(doubled_ranks.size()));
  double lower = 0.0, upper = 0.0;
  for (int s = 0; s <= total; ++s) {
    if (s <= w2_obs) lower += count[s];
    if (s >= w2_obs) upper += count[s];
  }
  return std::min(1.0, 2.0 * std::min(lower, upper) / all);
}

double normal_two_sided_p(double w, int n) {
  double mean = n * (n + 1) / 4.0;
  double sd = std::sqrt(n * (n + 1) * (2.0 * n + 1) / 24.0);
  double z = (std::abs(w - mean) - 0.5) / sd;
  if (z < 0.0) z = 0.0;
  return std::min(1.0, std::erfc(z / std::sqrt(2.0)));
}

}  // namespace

double wilcoxon_signed_rank(const std::vector<double>& a,
                            const std::vector<double>& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("evaluate: unpaired Wilcoxon samples");
  }
  std::vector<double> diffs;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    if (d != 0.0) diffs.push_back(d);
  }
  if (diffs.empty()) return 1.0;

  std::vector<std::size_t> order(diffs.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) {
    return std::abs(diffs[i]) < std::abs(diffs[j]);
  });
  // Average ranks across ties, stored doubled so they stay integers.
  std::vector<int> doubled_rank(diffs.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() &&
           std::abs(diffs[order[j + 1]]) == std::abs(diffs[order[i]])) {
      ++j;
    }
    int sum2 = 0;  // doubled ranks run from 2*(i+1) to 2*(j+1)
    for (std::size_t k = i; k <= j; ++k) sum2 += 2 * static_cast<int>(k + 1);
    int avg2 = sum2 / static_cast<int>(j - i + 1);
    for (std::size_t k = i; k <= j; ++k) doubled_rank[order[k]] = avg2;
    i = j + 1;
  }
  int w2_plus = 0;
  for (std::size_t k = 0; k < diffs.size(); ++k) {
    if (diffs[k] > 0.0) w2_plus += doubled_rank[k];
  }
  int n = static_cast<int>(diffs.size());
  if (n <= 25) return exact_two_sided_p(doubled_rank, w2_plus);
  return normal_two_sided_p(w2_plus / 2.0, n);
}

CohortReport build_report(const std::vector<CaseRow>& rows,
                          const std::vector<std::string>& expected_arms) {
  CohortReport rep;
  rep.rows = rows;
  std::sort(rep.rows.begin(), rep.rows.end(),
            [](const CaseRow& x, const CaseRow& y) {
              if (x.arm != y.arm) return x.arm < y.arm;
              return x.case_id < y.case_id;
            });

  std::map<std::string, std::vector<const CaseRow*>> by_arm;
  for (const CaseRow& r : rep.rows) by_arm[r.arm].push_back(&r);

  for (const std::string& arm : expected_arms) {
    if (by_arm.find(arm) == by_arm.end()) rep.missing_arms.push_back(arm);
  }

  for (const auto& [arm, arm_rows] : by_arm) {
    ArmAggregate agg;
    std::vector<double> all_v, surf_v, ape_v;
    for (const CaseRow* r : arm_rows) {
      all_v.push_back(r->rmse_all_mm);
      surf_v.push_back(r->rmse_surface_mm);
      if (r->ape_percent) ape_v.push_back(*r->ape_percent);
    }
    agg.rmse_all = mean_std(all_v);
    agg.rmse_surface = mean_std(surf_v);
    if (!ape_v.empty()) agg.ape = mean_std(ape_v);
    agg.cases = static_cast<int>(arm_rows.size());
    rep.per_arm[arm] = agg;
  }

  // Pairwise tests on surface rmse for arms sharing the same case set.
  std::vector<std::string> arms;
  for (const auto& [arm, _] : by_arm) arms.push_back(arm);
  for (std::size_t x = 0; x < arms.size(); ++x) {
    for (std::size_t y = x + 1; y < arms.size(); ++y) {
      const auto& ra = by_arm[arms[x]];
      const auto& rb = by_arm[arms[y]];
      if (ra.size() != rb.size()) continue;
      bool matched = true;
      std::vector<double> va, vb;
      for (std::size_t k = 0; k < ra.size(); ++k) {
        if (ra[k]->case_id != rb[k]->case_id) {
          matched = false;
          break;
        }
        va.push_back(ra[k]->rmse_surface_mm);
        vb.push_back(rb[k]->rmse_surface_mm);
      }
      if (!matched) continue;
      rep.p_values[{arms[x], arms[y]}] = wilcoxon_signed_rank(va, vb);
    }
  }
  return rep;
}

void write_report_csv(const CohortReport& report,
                      const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("evaluate: cannot write " + path.string());
  os << "case_id,arm,rmse_all_mm,rmse_surface_mm,beta_pred,ape_percent\n";
  char buf[256];
  for (const CaseRow& r : report.rows) {
    int len = std::snprintf(buf, sizeof(buf), "%s,%s,%.17g,%.17g,",
                            r.case_id.c_str(), r.arm.c_str(), r.rmse_all_mm,
                            r.rmse_surface_mm);
    os.write(buf, len);
    if (r.beta_pred) {
      len = std::snprintf(buf, sizeof(buf), "%.17g", *r.beta_pred);
      os.write(buf, len);
    }
    os << ",";
    if (r.ape_percent) {
      len = std::snprintf(buf, sizeof(buf), "%.17g", *r.ape_percent);
      os.write(buf, len);
    }
    os << "\n";
  }
}

void write_aggregates_json(const CohortReport& report,
                           const std::filesystem::path& path) {
  json j;
  j["statistical_test"] = "wilcoxon_signed_rank_two_sided";
  for (const auto& [arm, agg] : report.per_arm) {
    json a;
    a["cases"] = agg.cases;
    a["rmse_all_mm"] = {{"mean", agg.rmse_all.mean}, {"std", agg.rmse_all.std}};
    a["rmse_surface_mm"] = {{"mean", agg.rmse_surface.mean},
                            {"std", agg.rmse_surface.std}};
    if (agg.ape) {
      a["ape_percent"] = {{"mean", agg.ape->mean}, {"std", agg.ape->std}};
    }
    j["arms"][arm] = a;
  }
  for (const auto& [pair, p] : report.p_values) {
    j["p_values"][pair.first + "|" + pair.second] = p;
  }
  j["missing_arms"] = report.missing_arms;
  std::ofstream os(path);
  if (!os) throw std::runtime_error("evaluate: cannot write " + path.string());
  os << j.dump(2);
}

}  // namespace elastoreg::evaluate
