#pragma once

#include <string>
#include <vector>

#include "pcaplm/pcap.hpp"

namespace pcaplm {

enum class ReprKind { TEXT, DICT, PCT_DICT };

const char* repr_kind_name(ReprKind kind);
ReprKind repr_kind_from_name(const std::string& name);

// Field-name globs, matched case-insensitively on dotted names.
// An empty list allows everything.
struct FieldAllowlist {
  std::vector<std::string> entries;

  bool allows(const std::string& field_name) const;
  static FieldAllowlist allow_all() { return {}; }
  static FieldAllowlist defaults();
};

struct ReprLine {
  uint32_t frame_no = 0;
  std::string text;

  bool operator==(const ReprLine&) const = default;
};

struct SerializedCapture {
  std::string capture_id;
  ReprKind kind = ReprKind::PCT_DICT;
  std::vector<ReprLine> lines;
};

// Marker line preceding each packet in PCT-DICT output.
std::string frame_marker(uint32_t frame_no);

SerializedCapture build_text(const CaptureFile& capture);
SerializedCapture build_dict(const CaptureFile& capture, const FieldAllowlist& allow);
SerializedCapture build_pct_dict(const CaptureFile& capture, const FieldAllowlist& allow);

SerializedCapture build_repr(const CaptureFile& capture, ReprKind kind,
                             const FieldAllowlist& allow);

// One-line header (capture_id, kind), then "frame_no<TAB>text" records.
void save_serialized(const SerializedCapture& sc, const std::string& path);
SerializedCapture load_serialized(const std::string& path);

}  // namespace pcaplm
