#include "pcaplm/pcap.hpp"

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "pcaplm/errors.hpp"
#include "pcaplm/util.hpp"

namespace pcaplm {

namespace {

constexpr uint32_t kMagicMicro = 0xa1b2c3d4u;
constexpr uint32_t kMagicNano = 0xa1b23c4du;
constexpr uint32_t kMagicPcapng = 0x0a0d0d0au;
constexpr size_t kGlobalHeaderLen = 24;
constexpr size_t kRecordHeaderLen = 16;
// Records claiming more captured bytes than this are treated as corrupt
// rather than as a truncated tail.
constexpr uint32_t kMaxSaneRecordLen = 0x10000000u;

std::string hex_byte(uint8_t b) {
  char buf[3];
  std::snprintf(buf, sizeof buf, "%02x", b);
  return buf;
}

std::string mac_to_string(const uint8_t* p) {
  std::string out;
  for (int i = 0; i < 6; ++i) {
    if (i) out += ':';
    out += hex_byte(p[i]);
  }
  return out;
}

std::string ipv4_to_string(const uint8_t* p) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%u.%u.%u.%u", p[0], p[1], p[2], p[3]);
  return buf;
}

std::string ipv6_to_string(const uint8_t* p) {
  // Canonical-ish rendering: lowercase groups, longest zero run compressed.
  std::array<uint16_t, 8> g;
  for (int i = 0; i < 8; ++i) g[i] = static_cast<uint16_t>((p[2 * i] << 8) | p[2 * i + 1]);
  int best_start = -1, best_len = 0;
  for (int i = 0; i < 8;) {
    if (g[i] == 0) {
      int j = i;
      while (j < 8 && g[j] == 0) ++j;
      if (j - i > best_len) {
        best_len = j - i;
        best_start = i;
      }
      i = j;
    } else {
      ++i;
    }
  }
  if (best_len < 2) best_start = -1;
  std::string out;
  char buf[8];
  for (int i = 0; i < 8;) {
    if (i == best_start) {
      out += (i == 0) ? "::" : ":";
      i += best_len;
      if (i >= 8) break;
      continue;
    }
    if (!out.empty() && out.back() != ':') out += ':';
    std::snprintf(buf, sizeof buf, "%x", g[i]);
    out += buf;
    ++i;
  }
  if (out.empty()) out = "::";
  return out;
}

bool is_token_char(char c) {
  return (c >= 'A' && c <= 'Z') || (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') ||
         c == '-' || c == '_' || c == '.';
}

const char* kSipMethods[] = {"INVITE", "ACK",    "BYE",     "CANCEL", "OPTIONS",
                             "REGISTER", "SUBSCRIBE", "NOTIFY", "PRACK", "UPDATE",
                             "INFO",   "MESSAGE", "REFER",   "PUBLISH"};

bool looks_like_sip(std::string_view payload, bool& is_response) {
  if (payload.rfind("SIP/2.0 ", 0) == 0) {
    is_response = true;
    return true;
  }
  size_t sp = payload.find(' ');
  if (sp == std::string_view::npos || sp == 0) return false;
  std::string_view method = payload.substr(0, sp);
  for (const char* m : kSipMethods) {
    if (method == m) {
      size_t eol = payload.find('\n');
      std::string_view line = payload.substr(0, eol == std::string_view::npos ? payload.size() : eol);
      if (line.find("SIP/2.0") != std::string_view::npos) {
        is_response = false;
        return true;
      }
    }
  }
  return false;
}

void dissect_sip(std::string_view payload, PacketRecord& rec, bool is_response) {
  rec.protocols.push_back("sip");
  std::vector<std::string> lines;
  size_t start = 0;
  while (start <= payload.size()) {
    size_t nl = payload.find('\n', start);
    std::string_view line =
        payload.substr(start, (nl == std::string_view::npos ? payload.size() : nl) - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.emplace_back(line);
    if (nl == std::string_view::npos) break;
    start = nl + 1;
  }
  if (lines.empty()) return;

  const std::string& first = lines[0];
  if (is_response) {
    rec.fields.push_back({"sip.status-line.printable_value", first});
    // "SIP/2.0 <code> <reason>"
    auto parts = split_ws(first);
    if (parts.size() >= 2) rec.fields.push_back({"sip.status-code", parts[1]});
    if (parts.size() >= 3) {
      std::string reason = first.substr(first.find(parts[2], 8));
      rec.fields.push_back({"sip.reason-phrase", reason});
    }
  } else {
    rec.fields.push_back({"sip.request-line.printable_value", first});
    auto parts = split_ws(first);
    if (!parts.empty()) rec.fields.push_back({"sip.method", parts[0]});
    if (parts.size() >= 2) rec.fields.push_back({"sip.r-uri", parts[1]});
  }
  size_t i = 1;
  for (; i < lines.size(); ++i) {
    const std::string& line = lines[i];
    if (line.empty()) {
      ++i;
      break;  // headers end; rest is body
    }
    size_t colon = line.find(':');
    if (colon == std::string::npos || colon == 0) continue;
    std::string name = to_lower(trim(line.substr(0, colon)));
    bool ok = !name.empty();
    for (char c : name)
      if (!is_token_char(c)) ok = false;
    if (!ok) continue;
    rec.fields.push_back({"sip." + name, trim(line.substr(colon + 1))});
  }
  size_t body_len = 0;
  for (; i < lines.size(); ++i) body_len += lines[i].size() + 1;
  if (body_len > 0) rec.fields.push_back({"sip.body.len", std::to_string(body_len)});
}

}  // namespace

uint16_t ipv4_header_checksum(std::span<const uint8_t> header) {
  uint32_t sum = 0;
  for (size_t i = 0; i + 1 < header.size(); i += 2) sum += (header[i] << 8) | header[i + 1];
  if (header.size() % 2) sum += header.back() << 8;
  while (sum >> 16) sum = (sum & 0xffff) + (sum >> 16);
  return static_cast<uint16_t>(~sum & 0xffff);
}

std::string capture_id_of(const std::string& path) {
  std::filesystem::path p(path);
  std::string stem = p.stem().string();
  return stem.empty() ? path : stem;
}

PacketRecord dissect(std::span<const uint8_t> raw, uint32_t link_type) {
  PacketRecord rec;
  const uint8_t* p = raw.data();
  size_t n = raw.size();
  size_t off = 0;
  bool truncated = false;
  uint16_t ethertype = 0;
  uint8_t ip_proto = 0;
  bool have_l3 = false, have_l4 = false;

  auto mark_truncated = [&] { truncated = true; };

  if (link_type == 1) {
    if (n < 14) {
      mark_truncated();
    } else {
      rec.protocols.push_back("eth");
      rec.fields.push_back({"eth.dst", mac_to_string(p)});
      rec.fields.push_back({"eth.src", mac_to_string(p + 6)});
      ethertype = get_u16_be(p + 12);
      char buf[8];
      std::snprintf(buf, sizeof buf, "0x%04x", ethertype);
      rec.fields.push_back({"eth.type", buf});
      off = 14;
    }
  } else if (link_type == 101) {
    // Raw IP: version nibble picks the family.
    if (n >= 1) ethertype = (p[0] >> 4) == 6 ? 0x86dd : 0x0800;
  } else {
    rec.fields.push_back({"data.len", std::to_string(n)});
    if (n > 0) rec.protocols.push_back("data");
    return rec;
  }

  if (!truncated && ethertype == 0x0800) {
    if (n < off + 20) {
      mark_truncated();
    } else {
      size_t ihl = static_cast<size_t>(p[off] & 0x0f) * 4;
      if (ihl < 20 || n < off + ihl) {
        mark_truncated();
      } else {
        rec.protocols.push_back("ipv4");
        have_l3 = true;
        rec.fields.push_back({"ip.version", std::to_string(p[off] >> 4)});
        rec.fields.push_back({"ip.hdr_len", std::to_string(ihl)});
        rec.fields.push_back({"ip.len", std::to_string(get_u16_be(p + off + 2))});
        rec.fields.push_back({"ip.id", std::to_string(get_u16_be(p + off + 4))});
        rec.fields.push_back({"ip.ttl", std::to_string(p[off + 8])});
        ip_proto = p[off + 9];
        rec.fields.push_back({"ip.proto", std::to_string(ip_proto)});
        char buf[8];
        std::snprintf(buf, sizeof buf, "0x%04x", get_u16_be(p + off + 10));
        rec.fields.push_back({"ip.checksum", buf});
        if (ipv4_header_checksum({p + off, ihl}) != 0) rec.fields.push_back({"ip.checksum.bad", "1"});
        rec.fields.push_back({"ip.src", ipv4_to_string(p + off + 12)});
        rec.fields.push_back({"ip.dst", ipv4_to_string(p + off + 16)});
        off += ihl;
      }
    }
  } else if (!truncated && ethertype == 0x86dd) {
    if (n < off + 40) {
      mark_truncated();
    } else {
      rec.protocols.push_back("ipv6");
      have_l3 = true;
      rec.fields.push_back({"ipv6.plen", std::to_string(get_u16_be(p + off + 4))});
      ip_proto = p[off + 6];
      rec.fields.push_back({"ipv6.nxt", std::to_string(ip_proto)});
      rec.fields.push_back({"ipv6.hlim", std::to_string(p[off + 7])});
      rec.fields.push_back({"ipv6.src", ipv6_to_string(p + off + 8)});
      rec.fields.push_back({"ipv6.dst", ipv6_to_string(p + off + 24)});
      off += 40;
    }
  } else if (!truncated) {
    // Non-IP ethertype: leave the rest as opaque payload.
    size_t rest = n - off;
    rec.fields.push_back({"data.len", std::to_string(rest)});
    if (rest > 0) rec.protocols.push_back("data");
    rec.fields.insert(rec.fields.begin(),
                      {"frame.protocols", [&] {
                         std::string s;
                         for (size_t i = 0; i < rec.protocols.size(); ++i) {
                           if (i) s += ':';
                           s += rec.protocols[i];
                         }
                         return s;
                       }()});
    return rec;
  }

  size_t payload_off = off;
  if (have_l3 && !truncated) {
    if (ip_proto == 6) {
      if (n < off + 20) {
        mark_truncated();
      } else {
        size_t thl = static_cast<size_t>(p[off + 12] >> 4) * 4;
        if (thl < 20 || n < off + thl) {
          mark_truncated();
        } else {
          rec.protocols.push_back("tcp");
          have_l4 = true;
          rec.fields.push_back({"tcp.srcport", std::to_string(get_u16_be(p + off))});
          rec.fields.push_back({"tcp.dstport", std::to_string(get_u16_be(p + off + 2))});
          rec.fields.push_back({"tcp.seq", std::to_string(get_u32_be(p + off + 4))});
          rec.fields.push_back({"tcp.ack", std::to_string(get_u32_be(p + off + 8))});
          char buf[8];
          std::snprintf(buf, sizeof buf, "0x%03x", get_u16_be(p + off + 12) & 0x1ff);
          rec.fields.push_back({"tcp.flags", buf});
          rec.fields.push_back({"tcp.window", std::to_string(get_u16_be(p + off + 14))});
          payload_off = off + thl;
        }
      }
    } else if (ip_proto == 17) {
      if (n < off + 8) {
        mark_truncated();
      } else {
        rec.protocols.push_back("udp");
        have_l4 = true;
        rec.fields.push_back({"udp.srcport", std::to_string(get_u16_be(p + off))});
        rec.fields.push_back({"udp.dstport", std::to_string(get_u16_be(p + off + 2))});
        rec.fields.push_back({"udp.length", std::to_string(get_u16_be(p + off + 4))});
        char buf[8];
        std::snprintf(buf, sizeof buf, "0x%04x", get_u16_be(p + off + 6));
        rec.fields.push_back({"udp.checksum", buf});
        payload_off = off + 8;
      }
    }
  }

  if (!truncated && (have_l4 || have_l3)) {
    std::string_view payload(reinterpret_cast<const char*>(p + payload_off), n - payload_off);
    bool is_response = false;
    if (have_l4 && !payload.empty() && looks_like_sip(payload, is_response)) {
      dissect_sip(payload, rec, is_response);
    } else {
      rec.fields.push_back({"data.len", std::to_string(payload.size())});
      if (!payload.empty()) rec.protocols.push_back("data");
    }
  }

  if (truncated) rec.fields.push_back({"dissect.truncated", "1"});

  std::string protos;
  for (size_t i = 0; i < rec.protocols.size(); ++i) {
    if (i) protos += ':';
    protos += rec.protocols[i];
  }
  rec.fields.insert(rec.fields.begin(), {"frame.protocols", protos});
  return rec;
}

CaptureFile parse_pcap_bytes(const std::vector<uint8_t>& bytes, const std::string& path_label) {
  if (bytes.size() < 4) fail(Errc::bad_magic, path_label + ": too short to hold a pcap magic");
  uint32_t magic = get_u32_le(bytes.data());
  if (magic == kMagicPcapng || bswap32(magic) == kMagicPcapng)
    fail(Errc::bad_magic, path_label + ": pcapng is not supported, classic pcap only");

  CaptureFile cf;
  cf.path = path_label;
  bool swap = false;
  if (magic == kMagicMicro) {
    cf.ts_resolution = TsResolution::micro;
  } else if (magic == kMagicNano) {
    cf.ts_resolution = TsResolution::nano;
  } else if (bswap32(magic) == kMagicMicro) {
    cf.ts_resolution = TsResolution::micro;
    swap = true;
  } else if (bswap32(magic) == kMagicNano) {
    cf.ts_resolution = TsResolution::nano;
    swap = true;
  } else {
    char buf[16];
    std::snprintf(buf, sizeof buf, "0x%08x", magic);
    fail(Errc::bad_magic, path_label + ": unrecognized magic " + buf);
  }
  cf.byte_order = swap ? ByteOrder::big : ByteOrder::little;
  if (bytes.size() < kGlobalHeaderLen)
    fail(Errc::corrupt_header, path_label + ": global header incomplete");

  auto rd32 = [&](size_t off) {
    uint32_t v = get_u32_le(bytes.data() + off);
    return swap ? bswap32(v) : v;
  };
  auto rd16 = [&](size_t off) {
    uint16_t v = get_u16_le(bytes.data() + off);
    return swap ? bswap16(v) : v;
  };

  cf.version_major = rd16(4);
  cf.version_minor = rd16(6);
  cf.thiszone = static_cast<int32_t>(rd32(8));
  cf.sigfigs = rd32(12);
  cf.snaplen = rd32(16);
  cf.link_type = rd32(20);

  size_t off = kGlobalHeaderLen;
  uint32_t frame = 0;
  while (off < bytes.size()) {
    if (bytes.size() - off < kRecordHeaderLen) {
      ++cf.truncated_records;
      break;
    }
    PacketRecord rec;
    rec.ts_sec = rd32(off);
    rec.ts_frac = rd32(off + 4);
    uint32_t incl_len = rd32(off + 8);
    rec.orig_len = rd32(off + 12);
    if (incl_len > kMaxSaneRecordLen || incl_len > rec.orig_len)
      fail(Errc::corrupt_header,
           path_label + ": record " + std::to_string(frame + 1) + " header is inconsistent");
    off += kRecordHeaderLen;
    if (bytes.size() - off < incl_len) {
      ++cf.truncated_records;
      break;
    }
    rec.raw.assign(bytes.begin() + static_cast<long>(off),
                   bytes.begin() + static_cast<long>(off + incl_len));
    off += incl_len;
    rec.frame_no = ++frame;
    PacketRecord dis = dissect(rec.raw, cf.link_type);
    rec.fields = std::move(dis.fields);
    rec.protocols = std::move(dis.protocols);
    cf.packets.push_back(std::move(rec));
  }
  return cf;
}

std::vector<uint8_t> encode_pcap_bytes(const CaptureFile& capture) {
  std::vector<uint8_t> out;
  bool swap = capture.byte_order == ByteOrder::big;
  auto w32 = [&](uint32_t v) { put_u32_le(out, swap ? bswap32(v) : v); };
  auto w16 = [&](uint16_t v) { put_u16_le(out, swap ? bswap16(v) : v); };

  w32(capture.ts_resolution == TsResolution::nano ? kMagicNano : kMagicMicro);
  w16(capture.version_major);
  w16(capture.version_minor);
  w32(static_cast<uint32_t>(capture.thiszone));
  w32(capture.sigfigs);
  w32(capture.snaplen);
  w32(capture.link_type);
  for (const PacketRecord& rec : capture.packets) {
    w32(rec.ts_sec);
    w32(rec.ts_frac);
    w32(static_cast<uint32_t>(rec.raw.size()));
    w32(rec.orig_len);
    out.insert(out.end(), rec.raw.begin(), rec.raw.end());
  }
  return out;
}

CaptureFile read_pcap(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io_failure, "cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_pcap_bytes(bytes, path);
}

void write_pcap(const CaptureFile& capture, const std::string& path) {
  std::vector<uint8_t> bytes = encode_pcap_bytes(capture);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io_failure, "cannot open " + path + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<long>(bytes.size()));
  if (!out) fail(Errc::io_failure, "short write to " + path);
}

}  // namespace pcaplm
