#include "pcaplm/represent.hpp"

#include <fstream>
#include <map>

#include "pcaplm/errors.hpp"
#include "pcaplm/util.hpp"

namespace pcaplm {

namespace {

std::string render_field(const FieldEntry& field) {
  std::string line;
  if (field.value.empty() || to_lower(field.name) == to_lower(field.value))
    line = field.value.empty() ? field.name : field.value;
  else
    line = field.name + ": " + field.value;
  return to_lower(line);
}

}  // namespace

const char* repr_kind_name(ReprKind kind) {
  switch (kind) {
    case ReprKind::TEXT: return "text";
    case ReprKind::DICT: return "dict";
    case ReprKind::PCT_DICT: return "pct-dict";
  }
  return "pct-dict";
}

ReprKind repr_kind_from_name(const std::string& name) {
  std::string n = to_lower(name);
  if (n == "text") return ReprKind::TEXT;
  if (n == "dict") return ReprKind::DICT;
  if (n == "pct-dict" || n == "pct_dict" || n == "pctdict") return ReprKind::PCT_DICT;
  fail(Errc::bad_config, "unknown representation '" + name + "'");
}

bool FieldAllowlist::allows(const std::string& field_name) const {
  if (entries.empty()) return true;
  for (const std::string& pat : entries)
    if (glob_match(pat, field_name)) return true;
  return false;
}

FieldAllowlist FieldAllowlist::defaults() {
  // Protocol stack, status/request lines, method/cause style fields: the
  // compact signal set for the key-value representations.
  return {{
      "frame.protocols",
      "sip.request-line*",
      "sip.status-line*",
      "sip.method",
      "sip.status-code",
      "sip.reason-phrase",
      "sip.cseq",
      "*.cause*",
      "*.message-type*",
      "*.procedure*",
      "dissect.truncated",
  }};
}

std::string frame_marker(uint32_t frame_no) { return "## frame " + std::to_string(frame_no); }

SerializedCapture build_text(const CaptureFile& capture) {
  SerializedCapture sc;
  sc.capture_id = capture_id_of(capture.path);
  sc.kind = ReprKind::TEXT;
  for (const PacketRecord& rec : capture.packets)
    for (const FieldEntry& field : rec.fields)
      sc.lines.push_back({rec.frame_no, render_field(field)});
  return sc;
}

SerializedCapture build_dict(const CaptureFile& capture, const FieldAllowlist& allow) {
  SerializedCapture sc;
  sc.capture_id = capture_id_of(capture.path);
  sc.kind = ReprKind::DICT;
  // Tabular view: rows are packets, columns are field names in first-seen
  // order. Serialization walks column-major, which intentionally destroys
  // packet locality.
  std::vector<std::string> column_order;
  std::map<std::string, std::vector<ReprLine>> columns;
  for (const PacketRecord& rec : capture.packets) {
    for (const FieldEntry& field : rec.fields) {
      if (!allow.allows(field.name)) continue;
      auto [it, inserted] = columns.try_emplace(field.name);
      if (inserted) column_order.push_back(field.name);
      it->second.push_back({rec.frame_no, render_field(field)});
    }
  }
  for (const std::string& name : column_order) {
    auto& cells = columns[name];
    sc.lines.insert(sc.lines.end(), cells.begin(), cells.end());
  }
  return sc;
}

SerializedCapture build_pct_dict(const CaptureFile& capture, const FieldAllowlist& allow) {
  SerializedCapture sc;
  sc.capture_id = capture_id_of(capture.path);
  sc.kind = ReprKind::PCT_DICT;
  for (const PacketRecord& rec : capture.packets) {
    sc.lines.push_back({rec.frame_no, frame_marker(rec.frame_no)});
    for (const FieldEntry& field : rec.fields) {
      if (!allow.allows(field.name)) continue;
      sc.lines.push_back({rec.frame_no, render_field(field)});
    }
  }
  return sc;
}

SerializedCapture build_repr(const CaptureFile& capture, ReprKind kind,
                             const FieldAllowlist& allow) {
  switch (kind) {
    case ReprKind::TEXT: return build_text(capture);
    case ReprKind::DICT: return build_dict(capture, allow);
    case ReprKind::PCT_DICT: return build_pct_dict(capture, allow);
  }
  return build_pct_dict(capture, allow);
}

void save_serialized(const SerializedCapture& sc, const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io_failure, "cannot open " + path + " for writing");
  out << sc.capture_id << '\t' << repr_kind_name(sc.kind) << '\n';
  for (const ReprLine& line : sc.lines) out << line.frame_no << '\t' << line.text << '\n';
  if (!out) fail(Errc::io_failure, "short write to " + path);
}

SerializedCapture load_serialized(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io_failure, "cannot open " + path);
  SerializedCapture sc;
  std::string line;
  if (!std::getline(in, line)) fail(Errc::io_failure, path + ": missing header line");
  auto parts = split_char(line, '\t');
  if (parts.size() != 2) fail(Errc::io_failure, path + ": malformed header line");
  sc.capture_id = parts[0];
  sc.kind = repr_kind_from_name(parts[1]);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    size_t tab = line.find('\t');
    if (tab == std::string::npos) fail(Errc::io_failure, path + ": malformed record line");
    sc.lines.push_back({static_cast<uint32_t>(std::stoul(line.substr(0, tab))),
                        line.substr(tab + 1)});
  }
  return sc;
}

}  // namespace pcaplm
