#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace pcaplm {

struct FieldEntry {
  std::string name;   // dotted path, e.g. "sip.status-line.printable_value"
  std::string value;  // printable value, may be empty

  bool operator==(const FieldEntry&) const = default;
};

struct PacketRecord {
  uint32_t frame_no = 0;  // 1-based, strictly increasing within a capture
  uint32_t ts_sec = 0;
  uint32_t ts_frac = 0;  // microseconds or nanoseconds per CaptureFile::ts_resolution
  uint32_t orig_len = 0;
  std::vector<uint8_t> raw;  // captured bytes; raw.size() <= orig_len
  std::vector<FieldEntry> fields;       // never reordered after dissection
  std::vector<std::string> protocols;  // e.g. {"eth","ipv4","udp","sip"}
};

enum class ByteOrder { little, big };
enum class TsResolution { micro, nano };

struct CaptureFile {
  std::string path;
  ByteOrder byte_order = ByteOrder::little;
  TsResolution ts_resolution = TsResolution::micro;
  uint32_t link_type = 1;  // LINKTYPE_ETHERNET
  uint16_t version_major = 2;
  uint16_t version_minor = 4;
  int32_t thiszone = 0;
  uint32_t sigfigs = 0;
  uint32_t snaplen = 65535;
  uint32_t truncated_records = 0;  // dropped-on-read warning count
  std::vector<PacketRecord> packets;
};

// Capture id used throughout the pipeline: file name without directory/extension.
std::string capture_id_of(const std::string& path);

// Classic pcap only; both microsecond and nanosecond magics, both endiannesses.
// A truncated trailing record is dropped and counted, not an error.
CaptureFile read_pcap(const std::string& path);

// Byte-exact inverse of read_pcap for captures produced by this project.
void write_pcap(const CaptureFile& capture, const std::string& path);

// In-memory variants used by tests and the synthetic generator.
CaptureFile parse_pcap_bytes(const std::vector<uint8_t>& bytes, const std::string& path_label);
std::vector<uint8_t> encode_pcap_bytes(const CaptureFile& capture);

// Dissect one raw packet. Never throws: a malformed layer stops dissection at
// the last valid layer and appends a "dissect.truncated" field.
PacketRecord dissect(std::span<const uint8_t> raw, uint32_t link_type);

// RFC 791 header checksum over `header` (checksum field bytes included as-is).
uint16_t ipv4_header_checksum(std::span<const uint8_t> header);

}  // namespace pcaplm
