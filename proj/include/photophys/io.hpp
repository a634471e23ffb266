#pragma once

// File formats.
//
// Timestamp record: binary file
//   bytes 0..7   magic "PPTSREC1"
//   bytes 8..15  uint64 LE, events in channel A
//   bytes 16..23 uint64 LE, events in channel B
//   then int64 LE ticks of channel A followed by channel B
// plus a JSON sidecar "<file>.meta.json" with the RecordMeta (rates, program,
// chain, seed, tick size).
//
// Curves: CSV with a header row and floats at 9 significant digits, plus a
// sidecar with the curve metadata and the metadata of the source record.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "photophys/serialize.hpp"

namespace photophys::io {

inline constexpr char kRecordMagic[8] = {'P', 'P', 'T', 'S', 'R', 'E', 'C', '1'};

inline std::string sidecar_path(const std::string& path) { return path + ".meta.json"; }

inline std::string read_text(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw InputError(path + ": cannot open");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_text(const std::string& path, const std::string& text) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error(path + ": cannot write");
  f << text;
  if (!f) throw std::runtime_error(path + ": write failed");
}

inline json read_json(const std::string& path) {
  const std::string text = read_text(path);
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw InputError(path + ": JSON parse error at byte offset " + std::to_string(e.byte) + ": " + e.what());
  }
}

inline std::string dump(const json& j) { return j.dump(2) + "\n"; }

inline void write_json(const std::string& path, const json& j) { write_text(path, dump(j)); }

inline std::string format_g9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Records

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const std::string& in, std::size_t at) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string encode_record(const TimestampRecord& rec) {
  std::string out(kRecordMagic, sizeof kRecordMagic);
  out.reserve(24 + 8 * rec.total_events());
  detail::put_u64(out, rec.channel_a.size());
  detail::put_u64(out, rec.channel_b.size());
  for (auto t : rec.channel_a) detail::put_u64(out, static_cast<std::uint64_t>(t));
  for (auto t : rec.channel_b) detail::put_u64(out, static_cast<std::uint64_t>(t));
  return out;
}

inline json record_sidecar(const TimestampRecord& rec) {
  json j = to_json(rec.meta);
  j["counts"] = {{"channel_a", rec.channel_a.size()}, {"channel_b", rec.channel_b.size()}};
  return j;
}

inline void write_record(const std::string& path, const TimestampRecord& rec) {
  write_text(path, encode_record(rec));
  write_json(sidecar_path(path), record_sidecar(rec));
}

/// Decodes the binary body; `name` labels error messages.
inline void decode_record(const std::string& bytes, TimestampRecord& rec, const std::string& name) {
  if (bytes.size() < 24) throw InputError(name + ": truncated header at byte offset " + std::to_string(bytes.size()));
  if (bytes.compare(0, 8, std::string(kRecordMagic, 8)) != 0)
    throw InputError(name + ": bad magic at byte offset 0 (not a timestamp record)");
  const std::uint64_t na = detail::get_u64(bytes, 8), nb = detail::get_u64(bytes, 16);
  const std::uint64_t body = bytes.size() - 24;
  if (body % 8 != 0 || na > body / 8 || nb != body / 8 - na)
    throw InputError(name + ": header declares " + std::to_string(na) + " + " + std::to_string(nb) +
                     " events but the body holds " + std::to_string(body) + " bytes (byte offset 8)");
  rec.channel_a.resize(na);
  rec.channel_b.resize(nb);
  std::size_t at = 24;
  for (int c = 0; c < 2; ++c) {
    auto& ch = c == 0 ? rec.channel_a : rec.channel_b;
    for (std::size_t i = 0; i < ch.size(); ++i, at += 8) {
      ch[i] = static_cast<std::int64_t>(detail::get_u64(bytes, at));
      if (i > 0 && ch[i] <= ch[i - 1])
        throw InputError(name + ": timestamps not increasing at byte offset " + std::to_string(at));
      if (ch[i] < 0) throw InputError(name + ": negative timestamp at byte offset " + std::to_string(at));
    }
  }
}

inline TimestampRecord read_record(const std::string& path) {
  TimestampRecord rec;
  const std::string meta_path = sidecar_path(path);
  if (!std::filesystem::exists(meta_path)) throw InputError(path + ": missing metadata sidecar " + meta_path);
  rec.meta = record_meta_from_json(read_json(meta_path), meta_path);
  decode_record(read_text(path), rec, path);
  return rec;
}

// ---------------------------------------------------------------------------
// Curves

inline std::string g2_csv(const G2Curve& c) {
  std::string out = "tau_ns,g2,error,coincidences\n";
  for (std::size_t i = 0; i < c.size(); ++i)
    out += format_g9(c.bin_centers[i]) + "," + format_g9(c.values[i]) + "," + format_g9(c.errors[i]) + "," +
           format_g9(c.coincidences[i]) + "\n";
  return out;
}

inline std::string decay_csv(const DecayCurve& d) {
  std::string out = "t_ns,counts\n";
  for (std::size_t i = 0; i < d.counts.size(); ++i)
    out += format_g9(d.bin_centers[i]) + "," + format_g9(d.counts[i]) + "\n";
  return out;
}

/// Writes the CSV and its sidecar; `source` is the metadata of the record
/// the curve came from (may be null).
inline void write_curve(const std::string& path, const G2Curve& c, const json& source = nullptr,
                        const json& analysis = nullptr) {
  json meta = curve_meta(c);
  if (!analysis.is_null()) meta["analysis"] = analysis;
  if (!source.is_null()) meta["source"] = source;
  write_text(path, g2_csv(c));
  write_json(sidecar_path(path), meta);
}

inline void write_curve(const std::string& path, const DecayCurve& d, const json& source = nullptr,
                        const json& analysis = nullptr) {
  json meta = curve_meta(d);
  if (!analysis.is_null()) meta["analysis"] = analysis;
  if (!source.is_null()) meta["source"] = source;
  write_text(path, decay_csv(d));
  write_json(sidecar_path(path), meta);
}

namespace detail {

// Parses numeric CSV rows after a header; errors carry the byte offset of
// the offending line.
inline std::vector<std::vector<double>> parse_csv(const std::string& text, std::size_t columns,
                                                  const std::string& name) {
  std::vector<std::vector<double>> rows;
  std::size_t pos = text.find('\n');
  if (pos == std::string::npos) throw InputError(name + ": missing header row");
  ++pos;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) {
      std::vector<double> row;
      std::size_t a = 0;
      while (true) {
        const std::size_t b = line.find(',', a);
        const std::string cell = line.substr(a, b == std::string::npos ? std::string::npos : b - a);
        char* stop = nullptr;
        const double v = std::strtod(cell.c_str(), &stop);
        if (cell.empty() || *stop != '\0')
          throw InputError(name + ": malformed number '" + cell + "' at byte offset " + std::to_string(pos + a));
        row.push_back(v);
        if (b == std::string::npos) break;
        a = b + 1;
      }
      if (row.size() != columns)
        throw InputError(name + ": expected " + std::to_string(columns) + " columns at byte offset " +
                         std::to_string(pos));
      rows.push_back(std::move(row));
    }
    pos = end + 1;
  }
  return rows;
}

}  // namespace detail

/// Curve kind ("g2" or "decay") from the sidecar.
inline std::string curve_kind(const std::string& path) {
  const json meta = read_json(sidecar_path(path));
  if (!meta.is_object() || !meta.contains("kind") || !meta["kind"].is_string())
    throw InputError(sidecar_path(path) + ": missing curve kind");
  return meta["kind"].get<std::string>();
}

inline json curve_source(const std::string& path) {
  const json meta = read_json(sidecar_path(path));
  return meta.is_object() && meta.contains("source") ? meta["source"] : json(nullptr);
}

inline G2Curve read_g2_curve(const std::string& path) {
  const std::string meta_path = sidecar_path(path);
  const json meta = read_json(meta_path);
  ::photophys::detail::ObjectReader in(meta, meta_path);
  std::string kind;
  in.string("kind", kind, true);
  if (kind != "g2") throw InputError(meta_path + ": not a g2 curve (kind '" + kind + "')");
  G2Curve c;
  in.number("bin_width_ns", c.bin_width, true);
  in.number("acquisition_s", c.acquisition_s);
  in.number("rate_a", c.rate_a);
  in.number("rate_b", c.rate_b);
  in.string("normalization", c.normalization);
  in.strings("warnings", c.warnings);
  in.ignore("source");
  in.ignore("analysis");
  in.finish();
  for (const auto& row : detail::parse_csv(read_text(path), 4, path)) {
    c.bin_centers.push_back(row[0]);
    c.values.push_back(row[1]);
    c.errors.push_back(row[2]);
    c.coincidences.push_back(row[3]);
  }
  try {
    c.validate();
  } catch (const std::exception& e) {
    throw InputError(path + ": " + e.what());
  }
  return c;
}

inline DecayCurve read_decay_curve(const std::string& path) {
  const std::string meta_path = sidecar_path(path);
  const json meta = read_json(meta_path);
  ::photophys::detail::ObjectReader in(meta, meta_path);
  std::string kind;
  in.string("kind", kind, true);
  if (kind != "decay") throw InputError(meta_path + ": not a decay curve (kind '" + kind + "')");
  DecayCurve d;
  in.number("bin_width_ns", d.bin_width, true);
  in.number("rep_rate_mhz", d.rep_rate_mhz, true);
  in.strings("warnings", d.warnings);
  in.ignore("source");
  in.ignore("analysis");
  in.finish();
  for (const auto& row : detail::parse_csv(read_text(path), 2, path)) {
    d.bin_centers.push_back(row[0]);
    d.counts.push_back(row[1]);
  }
  if (d.counts.empty()) throw InputError(path + ": no rows");
  return d;
}

inline FitResult read_fit(const std::string& path) { return fit_result_from_json(read_json(path), path); }

}  // namespace photophys::io
