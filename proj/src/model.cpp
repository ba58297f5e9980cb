#include "pcaplm/model.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

namespace pcaplm {

ModelConfig ModelConfig::desk_scale() { return ModelConfig{}; }

ModelConfig ModelConfig::paper_scale() {
  ModelConfig mc;
  mc.layers = 6;
  mc.heads = 12;
  mc.hidden_dim = 768;
  mc.intermediate_dim = 3072;
  mc.dropout = 0.1;
  mc.max_positions = 64;
  mc.vocab_size = 30522;
  mc.chunk_size = 64;
  return mc;
}

void ModelConfig::validate() const {
  if (layers < 1 || heads < 1 || hidden_dim < 1 || intermediate_dim < 1 || vocab_size < 5 ||
      chunk_size < 2)
    fail(Errc::bad_config, "model dimensions must be positive");
  if (hidden_dim % heads != 0) fail(Errc::bad_config, "hidden_dim must be divisible by heads");
  if (max_positions < chunk_size) fail(Errc::bad_config, "max_positions must cover chunk_size");
  if (dropout < 0.0 || dropout >= 1.0) fail(Errc::bad_config, "dropout must lie in [0, 1)");
}

void TrainConfig::validate() const {
  if (beta1 <= 0.0 || beta1 >= 1.0 || beta2 <= 0.0 || beta2 >= 1.0)
    fail(Errc::bad_config, "beta coefficients must lie strictly between 0 and 1");
  if (patience > max_epochs) fail(Errc::bad_config, "patience cannot exceed max_epochs");
  if (patience < 1 || max_epochs < 1 || batch_size < 1)
    fail(Errc::bad_config, "patience, max_epochs and batch_size must be positive");
  if (mask_rate <= 0.0 || mask_rate >= 1.0)
    fail(Errc::bad_config, "mask rate must lie strictly between 0 and 1");
  if (lr <= 0.0) fail(Errc::bad_config, "learning rate must be positive");
}

namespace {

constexpr char kMagic[4] = {'L', 'C', 'A', 'P'};
constexpr uint32_t kVersion = 1;

std::string meta_to_text(const CheckpointMeta& meta) {
  char buf[512];
  std::string out;
  auto add = [&](const char* key, const std::string& value) {
    out += key;
    out += '=';
    out += value;
    out += '\n';
  };
  auto add_d = [&](const char* key, double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    add(key, buf);
  };
  auto add_i = [&](const char* key, long long v) { add(key, std::to_string(v)); };
  add_i("model.layers", meta.model.layers);
  add_i("model.heads", meta.model.heads);
  add_i("model.hidden_dim", meta.model.hidden_dim);
  add_i("model.intermediate_dim", meta.model.intermediate_dim);
  add_d("model.dropout", meta.model.dropout);
  add_i("model.max_positions", meta.model.max_positions);
  add_i("model.vocab_size", meta.model.vocab_size);
  add_i("model.chunk_size", meta.model.chunk_size);
  add_d("train.lr", meta.train.lr);
  add_d("train.weight_decay", meta.train.weight_decay);
  add_d("train.beta1", meta.train.beta1);
  add_d("train.beta2", meta.train.beta2);
  add_d("train.epsilon", meta.train.epsilon);
  add_i("train.batch_size", meta.train.batch_size);
  add_i("train.max_epochs", meta.train.max_epochs);
  add_i("train.patience", meta.train.patience);
  add_i("train.seed", static_cast<long long>(meta.train.seed));
  add_d("train.mask_rate", meta.train.mask_rate);
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(meta.vocab_hash));
  add("vocab_hash", buf);
  add("repr", meta.repr);
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(meta.config_hash));
  add("config_hash", buf);
  return out;
}

CheckpointMeta meta_from_text(const std::string& text) {
  CheckpointMeta meta;
  for (const std::string& line : split_char(text, '\n')) {
    size_t eq = line.find('=');
    if (eq == std::string::npos) continue;
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    if (key == "model.layers") meta.model.layers = std::stoi(value);
    else if (key == "model.heads") meta.model.heads = std::stoi(value);
    else if (key == "model.hidden_dim") meta.model.hidden_dim = std::stoi(value);
    else if (key == "model.intermediate_dim") meta.model.intermediate_dim = std::stoi(value);
    else if (key == "model.dropout") meta.model.dropout = std::stod(value);
    else if (key == "model.max_positions") meta.model.max_positions = std::stoi(value);
    else if (key == "model.vocab_size") meta.model.vocab_size = std::stoi(value);
    else if (key == "model.chunk_size") meta.model.chunk_size = std::stoi(value);
    else if (key == "train.lr") meta.train.lr = std::stod(value);
    else if (key == "train.weight_decay") meta.train.weight_decay = std::stod(value);
    else if (key == "train.beta1") meta.train.beta1 = std::stod(value);
    else if (key == "train.beta2") meta.train.beta2 = std::stod(value);
    else if (key == "train.epsilon") meta.train.epsilon = std::stod(value);
    else if (key == "train.batch_size") meta.train.batch_size = std::stoi(value);
    else if (key == "train.max_epochs") meta.train.max_epochs = std::stoi(value);
    else if (key == "train.patience") meta.train.patience = std::stoi(value);
    else if (key == "train.seed") meta.train.seed = std::stoull(value);
    else if (key == "train.mask_rate") meta.train.mask_rate = std::stod(value);
    else if (key == "vocab_hash") meta.vocab_hash = std::stoull(value, nullptr, 16);
    else if (key == "repr") meta.repr = value;
    else if (key == "config_hash") meta.config_hash = std::stoull(value, nullptr, 16);
  }
  return meta;
}

void append_f32_le(std::vector<uint8_t>& out, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32_le(out, bits);
}

float read_f32_le(const uint8_t* p) {
  uint32_t bits = get_u32_le(p);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace

void write_checkpoint_file(const std::string& path, const CheckpointMeta& meta,
                           const std::vector<std::pair<std::string, Eigen::MatrixXf>>& tensors) {
  std::vector<uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 4);
  put_u32_le(out, kVersion);
  std::string header = meta_to_text(meta);
  put_u32_le(out, static_cast<uint32_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());
  put_u32_le(out, static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_u32_le(out, static_cast<uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put_u32_le(out, 2);
    put_u64_le(out, static_cast<uint64_t>(t.rows()));
    put_u64_le(out, static_cast<uint64_t>(t.cols()));
    for (Eigen::Index r = 0; r < t.rows(); ++r)
      for (Eigen::Index c = 0; c < t.cols(); ++c) append_f32_le(out, t(r, c));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(Errc::io_failure, "cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<long>(out.size()));
  if (!f) fail(Errc::io_failure, "short write to " + path);
}

void read_checkpoint_file(const std::string& path, CheckpointMeta& meta,
                          std::vector<std::pair<std::string, Eigen::MatrixXf>>& tensors) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail(Errc::io_failure, "cannot open " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  size_t off = 0;
  auto need = [&](size_t n) {
    if (bytes.size() - off < n) fail(Errc::corrupt_header, path + ": checkpoint truncated");
  };
  need(8);
  if (std::memcmp(bytes.data(), kMagic, 4) != 0)
    fail(Errc::bad_magic, path + ": not a checkpoint file");
  uint32_t version = get_u32_le(bytes.data() + 4);
  if (version != kVersion)
    fail(Errc::corrupt_header, path + ": unsupported checkpoint version " + std::to_string(version));
  off = 8;
  need(4);
  uint32_t header_len = get_u32_le(bytes.data() + off);
  off += 4;
  need(header_len);
  meta = meta_from_text(std::string(bytes.begin() + static_cast<long>(off),
                                    bytes.begin() + static_cast<long>(off + header_len)));
  off += header_len;
  need(4);
  uint32_t count = get_u32_le(bytes.data() + off);
  off += 4;
  tensors.clear();
  tensors.reserve(count);
  for (uint32_t i = 0; i < count; ++i) {
    need(4);
    uint32_t name_len = get_u32_le(bytes.data() + off);
    off += 4;
    need(name_len);
    std::string name(bytes.begin() + static_cast<long>(off),
                     bytes.begin() + static_cast<long>(off + name_len));
    off += name_len;
    need(4);
    uint32_t ndims = get_u32_le(bytes.data() + off);
    off += 4;
    if (ndims != 2) fail(Errc::corrupt_header, path + ": tensors are rank-2 in this format");
    need(16);
    uint64_t rows = get_u64_le(bytes.data() + off);
    uint64_t cols = get_u64_le(bytes.data() + off + 8);
    off += 16;
    need(rows * cols * 4);
    Eigen::MatrixXf t(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (uint64_t r = 0; r < rows; ++r)
      for (uint64_t c = 0; c < cols; ++c) {
        t(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
            read_f32_le(bytes.data() + off);
        off += 4;
      }
    tensors.emplace_back(std::move(name), std::move(t));
  }
}

}  // namespace pcaplm
