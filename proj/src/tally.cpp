#include "exray/tally.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "exray/error.hpp"
#include "json.hpp"

namespace exray {

namespace {

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::io, "cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

ModelLabel parse_model_label(std::string_view text) {
  if (text == "clean") return ModelLabel::clean;
  if (text == "trojaned") return ModelLabel::trojaned;
  throw Error(ErrorCode::validation, "unknown model label '" + std::string(text) + "'");
}

std::string trim(std::string s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return {};
  return s.substr(first, s.find_last_not_of(" \t\r") - first + 1);
}

}  // namespace

void Tally::add(ModelLabel truth, ModelLabel predicted) {
  const bool pos = truth == ModelLabel::trojaned, hit = predicted == truth;
  if (pos) {
    hit ? ++tp : ++fn;
  } else {
    hit ? ++tn : ++fp;
  }
}

double Tally::accuracy() const {
  if (total() == 0) throw Error(ErrorCode::precondition, "empty tally");
  return static_cast<double>(tp + tn) / static_cast<double>(total());
}

ReportSummary summarize_report(std::string_view json_text) {
  const nlohmann::json j = nlohmann::json::parse(json_text.begin(), json_text.end(), nullptr, false);
  if (j.is_discarded() || !j.is_object()) throw Error(ErrorCode::validation, "report is not a JSON object");
  if (j.value("format", "") != "exray-report/1") throw Error(ErrorCode::validation, "not an exray-report/1 document");
  try {
    ReportSummary s;
    s.model_id = j.at("model_id").get<std::string>();
    s.mode = j.at("config").at("mode").get<std::string>();
    s.label = parse_model_label(j.at("model_label").get<std::string>());
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::validation, std::string("malformed report: ") + e.what());
  }
}

ReportSummary read_report_summary(const std::filesystem::path& path) {
  try {
    return summarize_report(read_text(path));
  } catch (const Error& e) {
    throw Error(e.code(), path.string() + ": " + e.what());
  }
}

GroundTruth parse_ground_truth(std::string_view csv_text) {
  std::istringstream in{std::string(csv_text)};
  std::string line;
  if (!std::getline(in, line) || trim(line) != "model_id,label") {
    throw Error(ErrorCode::manifest_mismatch, "ground-truth manifest must start with 'model_id,label'");
  }
  GroundTruth truth;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    line = trim(line);
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) {
      throw Error(ErrorCode::manifest_mismatch, "manifest row " + std::to_string(row) + " has no comma");
    }
    const std::string id = trim(line.substr(0, comma));
    ModelLabel label;
    try {
      label = parse_model_label(trim(line.substr(comma + 1)));
    } catch (const Error&) {
      throw Error(ErrorCode::manifest_mismatch, "manifest row " + std::to_string(row) + " has an unknown label");
    }
    if (!truth.emplace(id, label).second) throw Error(ErrorCode::manifest_mismatch, "duplicate model '" + id + "'");
  }
  return truth;
}

GroundTruth read_ground_truth(const std::filesystem::path& path) { return parse_ground_truth(read_text(path)); }

std::map<std::string, Tally> aggregate(std::span<const ReportSummary> reports, const GroundTruth& truth) {
  std::map<std::string, Tally> tallies;
  std::map<std::string, std::set<std::string>> seen;
  for (const ReportSummary& r : reports) {
    const auto it = truth.find(r.model_id);
    if (it == truth.end()) throw Error(ErrorCode::manifest_mismatch, "model '" + r.model_id + "' is not in the manifest");
    if (!seen[r.mode].insert(r.model_id).second) {
      throw Error(ErrorCode::manifest_mismatch, "model '" + r.model_id + "' appears twice for mode " + r.mode);
    }
    tallies[r.mode].add(it->second, r.label);
  }
  for (const auto& [mode, ids] : seen) {
    if (ids.size() != truth.size()) {
      throw Error(ErrorCode::manifest_mismatch, "mode " + mode + " covers " + std::to_string(ids.size()) + " of " +
                                                    std::to_string(truth.size()) + " manifest models");
    }
  }
  return tallies;
}

std::string tally_csv(const std::map<std::string, Tally>& tallies) {
  std::ostringstream out;
  out << "mode,tp,fp,fn,tn,accuracy\n";
  for (const auto& [mode, t] : tallies) {
    out << mode << ',' << t.tp << ',' << t.fp << ',' << t.fn << ',' << t.tn << ',' << t.accuracy() << '\n';
  }
  return out.str();
}

}  // namespace exray
