#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "pcaplm/pcap.hpp"

namespace pcaplm {

// Minimal XML element tree, just enough for PDML documents.
struct XmlNode {
  std::string tag;
  std::vector<std::pair<std::string, std::string>> attrs;  // document order
  std::vector<std::unique_ptr<XmlNode>> children;

  const std::string* attr(const std::string& name) const {
    for (const auto& [k, v] : attrs)
      if (k == name) return &v;
    return nullptr;
  }
};

// Strict parser for the element/attribute subset PDML uses. Throws
// Errc::malformed_xml on anything structurally broken.
std::unique_ptr<XmlNode> parse_xml(const std::string& text);

// PDML (packet -> proto -> field) to CaptureFile. Field values prefer
// showname, then show, then value; nesting is flattened depth-first.
CaptureFile ingest_pdml(const std::string& path);
CaptureFile ingest_pdml_text(const std::string& xml_text, const std::string& path_label);

}  // namespace pcaplm
