#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "scn/shift.hpp"
#include "scn/synthdata.hpp"

namespace scn {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Round-trippable decimal form of a double.
inline std::string format_full(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// 6 significant digits, for console output.
inline std::string format_short(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, const std::string& where) {
  const char* begin = s.c_str();
  char* end = nullptr;
  const double v = std::strtod(begin, &end);
  if (end == begin || *end != '\0') throw IoError(where + ": cannot parse '" + s + "' as a number");
  return v;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << text;
  if (!os) throw IoError("failed writing " + path.string());
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

inline nlohmann::json read_json(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

inline void write_json(const std::filesystem::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

inline std::filesystem::path meta_path(const std::filesystem::path& csv) {
  std::filesystem::path p = csv;
  p += ".meta.json";
  return p;
}

/// Header f0..f{d-1}, y0..y{L-1}, domain; one row per sample.
inline std::string dataset_to_csv(const Dataset& ds) {
  std::string out;
  for (std::size_t j = 0; j < ds.dim(); ++j) out += "f" + std::to_string(j) + ",";
  for (std::size_t l = 0; l < ds.num_labels(); ++l) out += "y" + std::to_string(l) + ",";
  out += "domain\n";
  const std::string tag = to_string(ds.domain);
  for (std::size_t r = 0; r < ds.size(); ++r) {
    for (std::size_t j = 0; j < ds.dim(); ++j) out += format_full(ds.features(r, j)) + ",";
    for (std::size_t l = 0; l < ds.num_labels(); ++l) out += format_full((*ds.labels)(r, l)) + ",";
    out += tag + "\n";
  }
  return out;
}

inline void write_dataset(const std::filesystem::path& path, const Dataset& ds) {
  ds.validate();
  write_text(path, dataset_to_csv(ds));
  nlohmann::json meta = {{"rows", ds.size()},
                         {"dim", ds.dim()},
                         {"labels", ds.num_labels()},
                         {"domain", to_string(ds.domain)},
                         {"generator", ds.generator}};
  write_json(meta_path(path), meta);
}

/// Reads a dataset CSV. If a metadata sidecar with a generator record sits
/// next to it, the density oracle is rebuilt from that record.
inline Dataset read_dataset(const std::filesystem::path& path) {
  std::istringstream is(read_text(path));
  std::string line;
  if (!std::getline(is, line)) throw IoError(path.string() + ": empty file");
  const auto header = split_csv_line(line);
  std::size_t d = 0, labels = 0;
  bool has_domain = false;
  for (const auto& h : header) {
    if (h == "domain") has_domain = true;
    else if (!h.empty() && h[0] == 'f') ++d;
    else if (!h.empty() && h[0] == 'y') ++labels;
    else throw IoError(path.string() + ": unexpected column '" + h + "'");
  }
  if (d + labels + (has_domain ? 1 : 0) != header.size()) throw IoError(path.string() + ": malformed header");
  std::vector<double> feats, ys;
  std::size_t rows = 0;
  Domain domain = Domain::train_p;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    const std::string where = path.string() + ":" + std::to_string(rows + 2);
    if (cells.size() != header.size()) throw IoError(where + ": expected " + std::to_string(header.size()) + " fields");
    for (std::size_t j = 0; j < d; ++j) feats.push_back(parse_double(cells[j], where));
    for (std::size_t l = 0; l < labels; ++l) ys.push_back(parse_double(cells[d + l], where));
    if (has_domain) domain = domain_from_string(cells.back());
    ++rows;
  }
  Dataset ds;
  ds.features = Matrix(rows, d, std::move(feats));
  if (labels > 0) ds.labels = Matrix(rows, labels, std::move(ys));
  ds.domain = domain;
  if (std::filesystem::exists(meta_path(path))) {
    const auto meta = read_json(meta_path(path));
    if (meta.contains("generator") && !meta["generator"].is_null()) {
      ds.generator = meta["generator"];
      ds.oracle = regenerate(ds.generator).oracle;
    }
  }
  return ds;
}

inline std::string weights_to_csv(const ShiftWeights& w) {
  std::string out = "index,weight\n";
  for (std::size_t i = 0; i < w.size(); ++i) out += std::to_string(i) + "," + format_full(w.values[i]) + "\n";
  return out;
}

inline ShiftWeights read_weights(const std::filesystem::path& path) {
  std::istringstream is(read_text(path));
  std::string line;
  if (!std::getline(is, line) || line != "index,weight") throw IoError(path.string() + ": expected header index,weight");
  ShiftWeights w;
  std::size_t row = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto cells = split_csv_line(line);
    const std::string where = path.string() + ":" + std::to_string(row + 2);
    if (cells.size() != 2) throw IoError(where + ": expected 2 fields");
    if (cells[0] != std::to_string(row)) throw IoError(where + ": index out of sequence");
    w.values.push_back(parse_double(cells[1], where));
    ++row;
  }
  w.validate();
  return w;
}

}  // namespace scn
