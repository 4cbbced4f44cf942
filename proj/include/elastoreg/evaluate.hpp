// Registration and inverse-problem metrics, paired cohort statistics and
// report-file generation.

#ifndef ELASTOREG_EVALUATE_HPP
#define ELASTOREG_EVALUATE_HPP

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "elastoreg/geometry.hpp"

namespace elastoreg::evaluate {

enum class Subset { All, Surface };

// sqrt(mean of squared displacement-error norms) over the chosen subset.
double rmse(const geometry::DisplacementField& pred,
            const geometry::DisplacementField& gt,
            const geometry::PointCloud& cloud, Subset subset);

// |(pred - gt) / gt| * 100.
double ape(double ratio_pred, double ratio_gt);

struct MeanStd {
  double mean;
  double std;  // population standard deviation
};

MeanStd mean_std(const std::vector<double>& values);

// Two-sided Wilcoxon signed-rank p-value on paired differences. Zero
// differences are dropped; ties share average ranks; the null
// distribution is enumerated exactly for n <= 25, with a normal
// approximation beyond. All-zero differences return 1.0.
double wilcoxon_signed_rank(const std::vector<double>& a,
                            const std::vector<double>& b);

struct CaseRow {
  std::string case_id;
  std::string arm;
  double rmse_all_mm = 0.0;
  double rmse_surface_mm = 0.0;
  std::optional<double> beta_pred;
  std::optional<double> ape_percent;
};

struct ArmAggregate {
  MeanStd rmse_all;
  MeanStd rmse_surface;
  std::optional<MeanStd> ape;
  int cases = 0;
};

struct CohortReport {
  std::vector<CaseRow> rows;
  std::map<std::string, ArmAggregate> per_arm;
  // p_values[{a, b}] for every unordered arm pair with matched case ids,
  // on surface rmse.
  std::map<std::pair<std::string, std::string>, double> p_values;
  std::vector<std::string> missing_arms;
};

CohortReport build_report(const std::vector<CaseRow>& rows,
                          const std::vector<std::string>& expected_arms);

void write_report_csv(const CohortReport& report,
                      const std::filesystem::path& path);
void write_aggregates_json(const CohortReport& report,
                           const std::filesystem::path& path);

}  // namespace elastoreg::evaluate

#endif
