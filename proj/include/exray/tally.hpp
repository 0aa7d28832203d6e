#pragma once

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "exray/verdict.hpp"

namespace exray {

/// Trojaned is the positive class.
struct Tally {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;

  void add(ModelLabel truth, ModelLabel predicted);
  [[nodiscard]] std::size_t total() const noexcept { return tp + fp + fn + tn; }
  [[nodiscard]] double accuracy() const;
};

struct ReportSummary {
  std::string model_id;
  std::string mode;
  ModelLabel label = ModelLabel::clean;
};

/// Reads the identifying fields of an "exray-report/1" document.
ReportSummary summarize_report(std::string_view json_text);
ReportSummary read_report_summary(const std::filesystem::path& path);

using GroundTruth = std::map<std::string, ModelLabel>;

/// CSV with header "model_id,label", label clean or trojaned.
GroundTruth parse_ground_truth(std::string_view csv_text);
GroundTruth read_ground_truth(const std::filesystem::path& path);

/// One tally per mode. Every report must name a model in `truth`, each mode
/// may see a model once, and every mode must cover every model in `truth`;
/// otherwise manifest_mismatch.
std::map<std::string, Tally> aggregate(std::span<const ReportSummary> reports, const GroundTruth& truth);

/// "mode,tp,fp,fn,tn,accuracy" plus one row per mode.
std::string tally_csv(const std::map<std::string, Tally>& tallies);

}  // namespace exray
