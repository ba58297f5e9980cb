#include "pcaplm/pdml.hpp"

#include <cctype>
#include <cstring>
#include <fstream>
#include <sstream>

#include "pcaplm/errors.hpp"
#include "pcaplm/util.hpp"

namespace pcaplm {

namespace {

class XmlParser {
 public:
  explicit XmlParser(const std::string& text) : s_(text) {}

  std::unique_ptr<XmlNode> parse() {
    skip_misc();
    auto root = parse_element();
    skip_misc();
    if (pos_ != s_.size()) err("trailing content after the root element");
    return root;
  }

 private:
  [[noreturn]] void err(const std::string& what) {
    fail(Errc::malformed_xml, what + " (offset " + std::to_string(pos_) + ")");
  }

  bool starts_with(const char* p) const { return s_.compare(pos_, std::strlen(p), p) == 0; }

  void skip_ws() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }

  // Whitespace, <?...?>, <!--...-->, <!DOCTYPE...> between elements.
  void skip_misc() {
    for (;;) {
      skip_ws();
      if (starts_with("<?")) {
        size_t end = s_.find("?>", pos_);
        if (end == std::string::npos) err("unterminated processing instruction");
        pos_ = end + 2;
      } else if (starts_with("<!--")) {
        size_t end = s_.find("-->", pos_);
        if (end == std::string::npos) err("unterminated comment");
        pos_ = end + 3;
      } else if (starts_with("<!")) {
        size_t end = s_.find('>', pos_);
        if (end == std::string::npos) err("unterminated declaration");
        pos_ = end + 1;
      } else {
        return;
      }
    }
  }

  std::string parse_name() {
    size_t start = pos_;
    while (pos_ < s_.size()) {
      char c = s_[pos_];
      if (std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.' ||
          c == ':')
        ++pos_;
      else
        break;
    }
    if (pos_ == start) err("expected a name");
    return s_.substr(start, pos_ - start);
  }

  std::string decode_entities(std::string_view raw) {
    std::string out;
    out.reserve(raw.size());
    for (size_t i = 0; i < raw.size();) {
      if (raw[i] != '&') {
        out += raw[i++];
        continue;
      }
      size_t semi = raw.find(';', i);
      if (semi == std::string_view::npos) err("unterminated entity");
      std::string_view ent = raw.substr(i + 1, semi - i - 1);
      if (ent == "lt")
        out += '<';
      else if (ent == "gt")
        out += '>';
      else if (ent == "amp")
        out += '&';
      else if (ent == "quot")
        out += '"';
      else if (ent == "apos")
        out += '\'';
      else if (!ent.empty() && ent[0] == '#') {
        long code = 0;
        try {
          code = (ent.size() > 1 && (ent[1] == 'x' || ent[1] == 'X'))
                     ? std::stol(std::string(ent.substr(2)), nullptr, 16)
                     : std::stol(std::string(ent.substr(1)));
        } catch (...) {
          err("bad character reference");
        }
        // UTF-8 encode.
        if (code < 0x80) {
          out += static_cast<char>(code);
        } else if (code < 0x800) {
          out += static_cast<char>(0xc0 | (code >> 6));
          out += static_cast<char>(0x80 | (code & 0x3f));
        } else if (code < 0x10000) {
          out += static_cast<char>(0xe0 | (code >> 12));
          out += static_cast<char>(0x80 | ((code >> 6) & 0x3f));
          out += static_cast<char>(0x80 | (code & 0x3f));
        } else {
          out += static_cast<char>(0xf0 | (code >> 18));
          out += static_cast<char>(0x80 | ((code >> 12) & 0x3f));
          out += static_cast<char>(0x80 | ((code >> 6) & 0x3f));
          out += static_cast<char>(0x80 | (code & 0x3f));
        }
      } else {
        err("unknown entity &" + std::string(ent) + ";");
      }
      i = semi + 1;
    }
    return out;
  }

  std::unique_ptr<XmlNode> parse_element() {
    if (pos_ >= s_.size() || s_[pos_] != '<') err("expected an element");
    ++pos_;
    auto node = std::make_unique<XmlNode>();
    node->tag = parse_name();
    for (;;) {
      skip_ws();
      if (pos_ >= s_.size()) err("unterminated start tag");
      if (starts_with("/>")) {
        pos_ += 2;
        return node;
      }
      if (s_[pos_] == '>') {
        ++pos_;
        break;
      }
      std::string key = parse_name();
      skip_ws();
      if (pos_ >= s_.size() || s_[pos_] != '=') err("expected '=' after attribute name");
      ++pos_;
      skip_ws();
      if (pos_ >= s_.size() || (s_[pos_] != '"' && s_[pos_] != '\'')) err("expected quoted value");
      char quote = s_[pos_++];
      size_t end = s_.find(quote, pos_);
      if (end == std::string::npos) err("unterminated attribute value");
      node->attrs.emplace_back(key, decode_entities(std::string_view(s_).substr(pos_, end - pos_)));
      pos_ = end + 1;
    }
    // Content: child elements and ignorable text, until the matching end tag.
    for (;;) {
      size_t lt = s_.find('<', pos_);
      if (lt == std::string::npos) err("missing end tag for <" + node->tag + ">");
      pos_ = lt;
      if (starts_with("</")) {
        pos_ += 2;
        std::string closing = parse_name();
        if (closing != node->tag)
          err("mismatched end tag </" + closing + "> for <" + node->tag + ">");
        skip_ws();
        if (pos_ >= s_.size() || s_[pos_] != '>') err("malformed end tag");
        ++pos_;
        return node;
      }
      if (starts_with("<!--")) {
        size_t end = s_.find("-->", pos_);
        if (end == std::string::npos) err("unterminated comment");
        pos_ = end + 3;
        continue;
      }
      node->children.push_back(parse_element());
    }
  }

  const std::string& s_;
  size_t pos_ = 0;
};

// Preference order for a PDML field rendering.
std::string field_value(const XmlNode& field) {
  if (const std::string* v = field.attr("showname")) return *v;
  if (const std::string* v = field.attr("show")) return *v;
  if (const std::string* v = field.attr("value")) return *v;
  return "";
}

void flatten_fields(const XmlNode& node, PacketRecord& rec) {
  for (const auto& child : node.children) {
    if (child->tag == "field") {
      const std::string* name = child->attr("name");
      rec.fields.push_back({name ? *name : "", field_value(*child)});
      if (rec.fields.back().name.empty()) rec.fields.pop_back();
      flatten_fields(*child, rec);
    } else {
      flatten_fields(*child, rec);
    }
  }
}

}  // namespace

std::unique_ptr<XmlNode> parse_xml(const std::string& text) { return XmlParser(text).parse(); }

CaptureFile ingest_pdml_text(const std::string& xml_text, const std::string& path_label) {
  auto root = parse_xml(xml_text);
  CaptureFile cf;
  cf.path = path_label;
  uint32_t frame = 0;

  auto ingest_packet = [&](const XmlNode& pkt) {
    PacketRecord rec;
    rec.frame_no = ++frame;
    for (const auto& child : pkt.children) {
      if (child->tag == "proto") {
        if (const std::string* pname = child->attr("name")) rec.protocols.push_back(*pname);
        flatten_fields(*child, rec);
      } else if (child->tag == "field") {
        // Tolerate packet-level fields outside any proto element.
        const std::string* name = child->attr("name");
        if (name && !name->empty()) rec.fields.push_back({*name, field_value(*child)});
        flatten_fields(*child, rec);
      }
    }
    cf.packets.push_back(std::move(rec));
  };

  if (root->tag == "packet") {
    ingest_packet(*root);
  } else {
    for (const auto& child : root->children)
      if (child->tag == "packet") ingest_packet(*child);
  }
  if (cf.packets.empty()) fail(Errc::empty_document, path_label + ": no packet elements");
  return cf;
}

CaptureFile ingest_pdml(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io_failure, "cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return ingest_pdml_text(ss.str(), path);
}

}  // namespace pcaplm
