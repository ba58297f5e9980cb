#include "pcaplm/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>

#include "pcaplm/errors.hpp"
#include "pcaplm/util.hpp"

namespace pcaplm {

namespace {

struct Endpoint {
  std::array<uint8_t, 6> mac;
  std::array<uint8_t, 4> ip;
  uint16_t port;
  std::string uri;  // sip:name@domain
};

struct DialogContext {
  Endpoint caller, callee;
  std::string call_id;    // numeric so the identifier rule redacts it whole
  std::string from_tag;
  std::string branch;
  std::string callee_domain;
};

std::string ip_str(const std::array<uint8_t, 4>& ip) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%u.%u.%u.%u", ip[0], ip[1], ip[2], ip[3]);
  return buf;
}

std::vector<uint8_t> build_sip_payload(const DialogContext& d, bool from_caller,
                                       const std::string& first_line, const std::string& cseq) {
  const Endpoint& src = from_caller ? d.caller : d.callee;
  std::string text = first_line + "\r\n";
  text += "Via: SIP/2.0/UDP " + ip_str(src.ip) + ":" + std::to_string(src.port) +
          ";branch=z9hG4bK" + d.branch + "\r\n";
  text += "From: <" + d.caller.uri + ">;tag=" + d.from_tag + "\r\n";
  text += "To: <" + d.callee.uri + ">\r\n";
  text += "Call-ID: " + d.call_id + "\r\n";
  text += "CSeq: " + cseq + "\r\n";
  text += "Max-Forwards: 70\r\n";
  text += "Content-Length: 0\r\n";
  text += "\r\n";
  return std::vector<uint8_t>(text.begin(), text.end());
}

std::vector<uint8_t> build_udp_ipv4_eth(const Endpoint& src, const Endpoint& dst,
                                        const std::vector<uint8_t>& payload, uint16_t ip_id) {
  std::vector<uint8_t> pkt;
  pkt.insert(pkt.end(), dst.mac.begin(), dst.mac.end());
  pkt.insert(pkt.end(), src.mac.begin(), src.mac.end());
  pkt.push_back(0x08);
  pkt.push_back(0x00);

  const size_t udp_len = 8 + payload.size();
  const size_t ip_len = 20 + udp_len;
  size_t ip_off = pkt.size();
  pkt.push_back(0x45);  // v4, ihl 5
  pkt.push_back(0x00);
  pkt.push_back(static_cast<uint8_t>(ip_len >> 8));
  pkt.push_back(static_cast<uint8_t>(ip_len & 0xff));
  pkt.push_back(static_cast<uint8_t>(ip_id >> 8));
  pkt.push_back(static_cast<uint8_t>(ip_id & 0xff));
  pkt.push_back(0x00);  // flags/frag
  pkt.push_back(0x00);
  pkt.push_back(64);  // ttl
  pkt.push_back(17);  // udp
  pkt.push_back(0x00);  // checksum placeholder
  pkt.push_back(0x00);
  pkt.insert(pkt.end(), src.ip.begin(), src.ip.end());
  pkt.insert(pkt.end(), dst.ip.begin(), dst.ip.end());
  uint16_t cks = ipv4_header_checksum({pkt.data() + ip_off, 20});
  pkt[ip_off + 10] = static_cast<uint8_t>(cks >> 8);
  pkt[ip_off + 11] = static_cast<uint8_t>(cks & 0xff);

  pkt.push_back(static_cast<uint8_t>(src.port >> 8));
  pkt.push_back(static_cast<uint8_t>(src.port & 0xff));
  pkt.push_back(static_cast<uint8_t>(dst.port >> 8));
  pkt.push_back(static_cast<uint8_t>(dst.port & 0xff));
  pkt.push_back(static_cast<uint8_t>(udp_len >> 8));
  pkt.push_back(static_cast<uint8_t>(udp_len & 0xff));
  pkt.push_back(0x00);  // udp checksum 0 = not computed, legal over ipv4
  pkt.push_back(0x00);
  pkt.insert(pkt.end(), payload.begin(), payload.end());
  return pkt;
}

struct FlowMessage {
  bool from_caller = true;
  std::string first_line;
  std::string cseq;
  double gap_seconds = 0.05;  // delay since the previous message
  bool planted = false;       // failure manifests at this message
};

class FlowBuilder {
 public:
  FlowBuilder(const FlowGrammar& grammar, DetRng& rng) : g_(grammar), rng_(rng) {}

  DialogContext make_dialog() {
    DialogContext d;
    auto pick = [&](const std::vector<std::string>& pool) {
      return pool[static_cast<size_t>(rng_.next_below(pool.size()))];
    };
    std::string caller_name = pick(g_.names);
    std::string callee_name = pick(g_.names);
    std::string caller_domain = pick(g_.domains);
    d.callee_domain = pick(g_.domains);
    for (int i = 0; i < 6; ++i) d.caller.mac[static_cast<size_t>(i)] = static_cast<uint8_t>(rng_.next_below(256));
    for (int i = 0; i < 6; ++i) d.callee.mac[static_cast<size_t>(i)] = static_cast<uint8_t>(rng_.next_below(256));
    d.caller.ip = {10, static_cast<uint8_t>(rng_.next_below(250)),
                   static_cast<uint8_t>(rng_.next_below(250)),
                   static_cast<uint8_t>(1 + rng_.next_below(250))};
    d.callee.ip = {10, static_cast<uint8_t>(rng_.next_below(250)),
                   static_cast<uint8_t>(rng_.next_below(250)),
                   static_cast<uint8_t>(1 + rng_.next_below(250))};
    d.caller.port = static_cast<uint16_t>(5060 + rng_.next_below(1000));
    d.callee.port = 5060;
    d.caller.uri = "sip:" + caller_name + "@" + caller_domain;
    d.callee.uri = "sip:" + callee_name + "@" + d.callee_domain;
    d.call_id = std::to_string(100000000 + rng_.next_below(900000000));
    d.from_tag = std::to_string(1000 + rng_.next_below(9000));
    d.branch = std::to_string(10000000 + rng_.next_below(90000000));
    return d;
  }

  // Complete dialog: optional REGISTER, INVITE, provisionals, 200, ACK,
  // BYE, 200.
  std::vector<FlowMessage> success_flow(const DialogContext& d) {
    std::vector<FlowMessage> flow;
    if (rng_.next_double() < g_.p_register) {
      flow.push_back({true, "REGISTER sip:" + d.callee_domain + " SIP/2.0", "1 REGISTER", 0.02});
      flow.push_back({false, "SIP/2.0 200 OK", "1 REGISTER", 0.02});
    }
    flow.push_back({true, "INVITE " + d.callee.uri + " SIP/2.0", "1 INVITE", 0.05});
    flow.push_back({false, "SIP/2.0 100 Trying", "1 INVITE", 0.01});
    if (rng_.next_double() < g_.p_progress)
      flow.push_back({false, "SIP/2.0 183 Session Progress", "1 INVITE", 0.02});
    int rings = 1 + static_cast<int>(rng_.next_below(static_cast<uint64_t>(g_.max_ringing)));
    for (int i = 0; i < rings; ++i)
      flow.push_back({false, "SIP/2.0 180 Ringing", "1 INVITE", 0.4});
    flow.push_back({false, "SIP/2.0 200 OK", "1 INVITE", 0.8});
    flow.push_back({true, "ACK " + d.callee.uri + " SIP/2.0", "1 ACK", 0.02});
    flow.push_back({true, "BYE " + d.callee.uri + " SIP/2.0", "2 BYE", 2.0});
    flow.push_back({false, "SIP/2.0 200 OK", "2 BYE", 0.02});
    return flow;
  }

  std::vector<FlowMessage> failure_flow(const DialogContext& d, FailureMode mode) {
    std::vector<FlowMessage> flow = success_flow(d);
    switch (mode) {
      case FailureMode::error_status: {
        // Replace the final response and everything after it; the error is
        // acknowledged and the dialog dies.
        size_t at = find_invite_ok(flow);
        flow.resize(at);
        const std::string& status =
            g_.error_statuses[static_cast<size_t>(rng_.next_below(g_.error_statuses.size()))];
        flow.push_back({false, "SIP/2.0 " + status, "1 INVITE", 0.3, true});
        flow.push_back({true, "ACK " + d.callee.uri + " SIP/2.0", "1 ACK", 0.02});
        break;
      }
      case FailureMode::timeout_gap: {
        // No response beyond 100 Trying; the INVITE retransmits into silence.
        size_t invite = find_first(flow, "INVITE ");
        FlowMessage original = flow[invite];
        flow.resize(invite + 2);  // keep INVITE and the 100 Trying
        double gap = 0.5;
        for (int i = 0; i < g_.invite_retransmissions; ++i) {
          FlowMessage retrans = original;
          retrans.gap_seconds = gap;
          retrans.planted = true;
          flow.push_back(retrans);
          gap *= 2;
        }
        break;
      }
      case FailureMode::missing_message: {
        // Silently drop an essential step; the message after the hole is
        // where the deviation becomes visible.
        size_t drop;
        if (rng_.next_below(2) == 0)
          drop = find_invite_ok(flow);
        else
          drop = find_first(flow, "ACK ");
        flow.erase(flow.begin() + static_cast<long>(drop));
        if (drop < flow.size()) flow[drop].planted = true;
        break;
      }
    }
    return flow;
  }

 private:
  static size_t find_first(const std::vector<FlowMessage>& flow, const std::string& prefix) {
    for (size_t i = 0; i < flow.size(); ++i)
      if (flow[i].first_line.rfind(prefix, 0) == 0) return i;
    fail(Errc::empty_grammar, "flow lacks expected message " + prefix);
  }

  // The 200 OK that answers the INVITE, not a REGISTER response.
  static size_t find_invite_ok(const std::vector<FlowMessage>& flow) {
    for (size_t i = 0; i < flow.size(); ++i)
      if (flow[i].first_line == "SIP/2.0 200 OK" && flow[i].cseq == "1 INVITE") return i;
    fail(Errc::empty_grammar, "flow lacks the INVITE final response");
  }

  const FlowGrammar& g_;
  DetRng& rng_;
};

LabeledCapture realize(const FlowGrammar& grammar, Label label, int index, uint64_t seed) {
  DetRng rng(mix64(seed, mix64(label == Label::failure ? 0xfa11ull : 0x5ccull,
                               static_cast<uint64_t>(index))));
  FlowBuilder builder(grammar, rng);
  DialogContext dialog = builder.make_dialog();

  std::vector<FlowMessage> flow;
  FailureMode mode = FailureMode::error_status;
  if (label == Label::failure) {
    mode = grammar.failure_modes[static_cast<size_t>(rng.next_below(grammar.failure_modes.size()))];
    flow = builder.failure_flow(dialog, mode);
  } else {
    flow = builder.success_flow(dialog);
  }

  LabeledCapture lc;
  lc.label = label;
  char name[64];
  std::snprintf(name, sizeof name, "%s_%04d.pcap", label == Label::failure ? "failure" : "success",
                index);
  lc.capture.path = name;
  lc.capture.link_type = 1;

  double clock = 1700000000.0 + static_cast<double>(rng.next_below(86400));
  uint16_t ip_id = static_cast<uint16_t>(rng.next_below(60000));
  uint32_t frame = 0;
  for (const FlowMessage& msg : flow) {
    clock += msg.gap_seconds;
    PacketRecord rec;
    rec.frame_no = ++frame;
    rec.ts_sec = static_cast<uint32_t>(clock);
    rec.ts_frac = static_cast<uint32_t>((clock - static_cast<double>(rec.ts_sec)) * 1e6);
    auto payload = build_sip_payload(dialog, msg.from_caller, msg.first_line, msg.cseq);
    rec.raw = msg.from_caller
                  ? build_udp_ipv4_eth(dialog.caller, dialog.callee, payload, ip_id++)
                  : build_udp_ipv4_eth(dialog.callee, dialog.caller, payload, ip_id++);
    rec.orig_len = static_cast<uint32_t>(rec.raw.size());
    PacketRecord dis = dissect(rec.raw, lc.capture.link_type);
    rec.fields = std::move(dis.fields);
    rec.protocols = std::move(dis.protocols);
    lc.capture.packets.push_back(std::move(rec));
    if (msg.planted) lc.planted_frames.push_back(frame);
  }
  return lc;
}

}  // namespace

std::vector<LabeledCapture> generate(const FlowGrammar& grammar, int n_success, int n_failure,
                                     uint64_t seed) {
  if (n_success < 0 || n_failure < 0) fail(Errc::bad_config, "capture counts must be nonnegative");
  if (grammar.names.empty() || grammar.domains.empty() || grammar.error_statuses.empty() ||
      grammar.failure_modes.empty() || grammar.max_ringing < 1)
    fail(Errc::empty_grammar, "grammar needs names, domains, error statuses and failure modes");
  std::vector<LabeledCapture> out;
  out.reserve(static_cast<size_t>(n_success + n_failure));
  for (int i = 0; i < n_success; ++i) out.push_back(realize(grammar, Label::success, i + 1, seed));
  for (int i = 0; i < n_failure; ++i) out.push_back(realize(grammar, Label::failure, i + 1, seed));
  return out;
}

CorpusSplit split(const std::vector<LabeledCapture>& captures, const std::vector<double>& ratios,
                  uint64_t seed) {
  if (ratios.size() != 3) fail(Errc::bad_config, "need (train, val, test) ratios");
  double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(sum - 1.0) > 1e-9) fail(Errc::bad_config, "split ratios must sum to 1");

  std::vector<size_t> succ, failed;
  for (size_t i = 0; i < captures.size(); ++i)
    (captures[i].label == Label::failure ? failed : succ).push_back(i);
  DetRng rng(mix64(seed, 0x73706c69ull));
  rng.shuffle(succ);
  rng.shuffle(failed);

  size_t val_fail = 0, test_fail = 0, val_succ = 0, test_succ = 0;
  if (!failed.empty()) {
    double val_frac = ratios[1] + ratios[2] > 0 ? ratios[1] / (ratios[1] + ratios[2]) : 0.5;
    val_fail = static_cast<size_t>(std::floor(static_cast<double>(failed.size()) * val_frac));
    test_fail = failed.size() - val_fail;
    val_succ = val_fail;  // balanced classes in val and test
    test_succ = test_fail;
  } else {
    val_succ = static_cast<size_t>(std::floor(static_cast<double>(succ.size()) * ratios[1]));
    test_succ = static_cast<size_t>(std::floor(static_cast<double>(succ.size()) * ratios[2]));
  }
  if (succ.size() < val_succ + test_succ + 1)
    fail(Errc::insufficient_captures, "not enough successful captures to satisfy the split");

  CorpusSplit out;
  size_t cursor = 0;
  for (size_t i = 0; i < val_succ; ++i) out.val.push_back(captures[succ[cursor++]]);
  for (size_t i = 0; i < test_succ; ++i) out.test.push_back(captures[succ[cursor++]]);
  for (; cursor < succ.size(); ++cursor) out.train.push_back(captures[succ[cursor]]);
  for (size_t i = 0; i < val_fail; ++i) out.val.push_back(captures[failed[i]]);
  for (size_t i = 0; i < test_fail; ++i) out.test.push_back(captures[failed[val_fail + i]]);
  return out;
}

}  // namespace pcaplm
