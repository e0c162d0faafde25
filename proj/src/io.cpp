#include "retrikt/io.hpp"

#include "retrikt/data.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace retrikt {

namespace {
constexpr char kCheckpointMagic[] = "RKTCKPT1";
}

void BinaryWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void BinaryWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void BinaryWriter::f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }

void BinaryWriter::bytes(std::string_view s) { buf_.append(s); }

void BinaryWriter::str(std::string_view s) {
  u32(static_cast<std::uint32_t>(s.size()));
  bytes(s);
}

void BinaryWriter::write_file(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
  if (!out) throw FormatError("write failed for " + path.string());
}

BinaryReader::BinaryReader(std::string data, std::string source) : data_(std::move(data)), source_(std::move(source)) {}

BinaryReader BinaryReader::from_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return BinaryReader(std::move(data), path.string());
}

void BinaryReader::fail(const std::string& what) const {
  throw FormatError(source_ + ": " + what + " at offset " + std::to_string(pos_));
}

void BinaryReader::need(std::size_t n) {
  if (data_.size() - pos_ < n) {
    fail("truncated: need " + std::to_string(n) + " bytes, have " + std::to_string(data_.size() - pos_));
  }
}

std::uint8_t BinaryReader::u8() {
  need(1);
  return static_cast<std::uint8_t>(data_[pos_++]);
}

std::uint32_t BinaryReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t BinaryReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
  pos_ += 8;
  return v;
}

float BinaryReader::f32() { return std::bit_cast<float>(u32()); }

std::string BinaryReader::bytes(std::size_t n) {
  need(n);
  std::string s = data_.substr(pos_, n);
  pos_ += n;
  return s;
}

std::string BinaryReader::str() {
  std::uint32_t n = u32();
  return bytes(n);
}

const std::string& Checkpoint::get(const std::string& key) const {
  auto it = header.find(key);
  if (it == header.end()) throw FormatError("checkpoint '" + kind + "' has no header key '" + key + "'");
  return it->second;
}

int Checkpoint::get_int(const std::string& key) const { return std::stoi(get(key)); }

const nn::Matrix& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, m] : tensors) {
    if (n == name) return m;
  }
  throw FormatError("checkpoint '" + kind + "' has no tensor '" + name + "'");
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  BinaryWriter w;
  w.bytes(std::string_view(kCheckpointMagic, 8));
  std::string head = "kind=" + ckpt.kind + "\n";
  for (const auto& [k, v] : ckpt.header) head += k + "=" + v + "\n";
  w.str(head);
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, m] : ckpt.tensors) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(m.rows()));
    w.u32(static_cast<std::uint32_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.size(); ++i) w.f32(static_cast<float>(m.data()[i]));
  }
  w.u64(fnv1a64(w.buffer()));
  w.write_file(path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto r = BinaryReader::from_file(path);
  if (r.bytes(8) != std::string(kCheckpointMagic, 8)) r.fail("bad checkpoint magic");
  Checkpoint ckpt;
  std::istringstream head(r.str());
  std::string line;
  while (std::getline(head, line)) {
    auto eq = line.find('=');
    if (eq == std::string::npos) r.fail("malformed header line '" + line + "'");
    auto key = line.substr(0, eq);
    if (key == "kind") ckpt.kind = line.substr(eq + 1);
    else ckpt.header[key] = line.substr(eq + 1);
  }
  std::uint32_t n = r.u32();
  for (std::uint32_t t = 0; t < n; ++t) {
    std::string name = r.str();
    std::uint32_t rows = r.u32(), cols = r.u32();
    nn::Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(r.f32());
    ckpt.tensors.emplace_back(std::move(name), std::move(m));
  }
  std::size_t body = r.offset();
  std::uint64_t stored = r.u64();
  if (stored != fnv1a64(std::string_view(r.data()).substr(0, body))) r.fail("checksum mismatch");
  if (r.offset() != r.size()) r.fail("trailing bytes");
  return ckpt;
}

std::string file_hash(const std::filesystem::path& path) {
  auto r = BinaryReader::from_file(path);
  return hex64(fnv1a64(r.data()));
}

void put_parameters(Checkpoint& ckpt, const nn::ParameterList& params, const std::string& prefix) {
  for (const auto& p : params) ckpt.tensors.emplace_back(prefix + p.name, p.tensor->value);
}

void get_parameters(const Checkpoint& ckpt, const nn::ParameterList& params, const std::string& prefix) {
  for (const auto& p : params) {
    const auto& m = ckpt.tensor(prefix + p.name);
    if (m.rows() != p.tensor->rows() || m.cols() != p.tensor->cols()) {
      throw FormatError("tensor '" + prefix + p.name + "' has shape " + std::to_string(m.rows()) + "x" +
                        std::to_string(m.cols()) + ", expected " + std::to_string(p.tensor->rows()) + "x" +
                        std::to_string(p.tensor->cols()));
    }
    p.tensor->value = m;
  }
}

}  // namespace retrikt
