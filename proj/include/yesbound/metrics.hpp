#pragma once

// metrics.csv + metrics.jsonl writer. Rows are buffered and written at
// flush(), which the training loops call once per monitoring epoch.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "yesbound/error.hpp"

namespace yesbound::metrics {

inline constexpr const char* kCsvHeader = "epoch,series,split,raw,monotonized,manifest_hash";

struct Row {
  std::int64_t epoch = 0;
  std::string series;
  std::string split;
  double raw = 0.0;
  double monotonized = 0.0;
  std::string manifest_hash;
};

inline std::string csv_line(const Row& r) {
  char buf[96];
  std::string s = std::to_string(r.epoch) + "," + r.series + "," + r.split + ",";
  std::snprintf(buf, sizeof buf, "%.17g,%.17g,", r.raw, r.monotonized);
  return s + buf + r.manifest_hash;
}

inline nlohmann::json to_json(const Row& r) {
  return {{"epoch", r.epoch},   {"series", r.series},           {"split", r.split},
          {"raw", r.raw},       {"monotonized", r.monotonized}, {"manifest_hash", r.manifest_hash}};
}

/// Running prefix minimum per (series, split).
class Monotonizer {
 public:
  double update(const std::string& series, const std::string& split, double raw) {
    auto [it, inserted] = best_.try_emplace({series, split}, raw);
    if (!inserted && raw < it->second) it->second = raw;
    return it->second;
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& [k, v] : best_) j.push_back({{"series", k.first}, {"split", k.second}, {"best", v}});
    return j;
  }

  void from_json(const nlohmann::json& j) {
    best_.clear();
    for (const auto& e : j) {
      best_[{e.at("series").get<std::string>(), e.at("split").get<std::string>()}] =
          e.at("best").get<double>();
    }
  }

 private:
  std::map<std::pair<std::string, std::string>, double> best_;
};

class Sink {
 public:
  /// `dir` empty keeps rows in memory only.
  Sink(std::filesystem::path dir, std::string manifest_hash, bool append = false)
      : dir_(std::move(dir)), hash_(std::move(manifest_hash)) {
    if (dir_.empty()) return;
    std::error_code ec;
    std::filesystem::create_directories(dir_, ec);
    if (ec) fail(ErrorKind::IoError, "cannot create output directory " + dir_.string());
    const bool had_csv = std::filesystem::exists(csv_path());
    const auto mode = append ? std::ios::app : std::ios::trunc;
    csv_.open(csv_path(), std::ios::out | mode);
    jsonl_.open(jsonl_path(), std::ios::out | mode);
    if (!csv_ || !jsonl_) fail(ErrorKind::IoError, "cannot open metrics files in " + dir_.string());
    if (!(append && had_csv)) {
      csv_ << kCsvHeader << '\n';
      csv_.flush();
    }
  }

  std::filesystem::path csv_path() const { return dir_ / "metrics.csv"; }
  std::filesystem::path jsonl_path() const { return dir_ / "metrics.jsonl"; }
  const std::string& manifest_hash() const { return hash_; }

  const Row& record(std::int64_t epoch, const std::string& series, const std::string& split,
                    double raw) {
    Row r{epoch, series, split, raw, mono_.update(series, split, raw), hash_};
    rows_.push_back(std::move(r));
    return rows_.back();
  }

  void flush() {
    if (dir_.empty()) {
      written_ = rows_.size();
      return;
    }
    for (; written_ < rows_.size(); ++written_) {
      csv_ << csv_line(rows_[written_]) << '\n';
      jsonl_ << to_json(rows_[written_]).dump() << '\n';
    }
    csv_.flush();
    jsonl_.flush();
    if (!csv_ || !jsonl_) fail(ErrorKind::IoError, "failed writing metrics to " + dir_.string());
  }

  const std::vector<Row>& rows() const { return rows_; }
  Monotonizer& monotonizer() { return mono_; }
  const Monotonizer& monotonizer() const { return mono_; }

 private:
  std::filesystem::path dir_;
  std::string hash_;
  std::ofstream csv_, jsonl_;
  std::vector<Row> rows_;
  std::size_t written_ = 0;
  Monotonizer mono_;
};

/// Parses a metrics.csv written by Sink (used by tests and tooling).
inline std::vector<Row> read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::IoError, "cannot open " + path.string());
  std::string line;
  std::getline(in, line);
  if (line != kCsvHeader) fail(ErrorKind::FormatError, path.string() + ": unexpected header", 0);
  std::vector<Row> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t p; (p = line.find(',', start)) != std::string::npos; start = p + 1) {
      f.push_back(line.substr(start, p - start));
    }
    f.push_back(line.substr(start));
    if (f.size() != 6) fail(ErrorKind::FormatError, path.string() + ": bad row", lineno);
    rows.push_back({std::stoll(f[0]), f[1], f[2], std::stod(f[3]), std::stod(f[4]), f[5]});
  }
  return rows;
}

}  // namespace yesbound::metrics
