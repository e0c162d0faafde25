#pragma once

// Little-endian binary encoding shared by checkpoints and knowledge stores,
// plus the shared checkpoint container.

#include "retrikt/nn.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace retrikt {

class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class BinaryWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f32(float v);
  void bytes(std::string_view s);
  // u32 length followed by raw bytes.
  void str(std::string_view s);

  const std::string& buffer() const { return buf_; }
  void write_file(const std::filesystem::path& path) const;

 private:
  std::string buf_;
};

class BinaryReader {
 public:
  explicit BinaryReader(std::string data, std::string source = "buffer");
  static BinaryReader from_file(const std::filesystem::path& path);

  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  float f32();
  std::string bytes(std::size_t n);
  std::string str();

  std::size_t offset() const { return pos_; }
  std::size_t size() const { return data_.size(); }
  const std::string& data() const { return data_; }
  [[noreturn]] void fail(const std::string& what) const;

 private:
  void need(std::size_t n);
  std::string data_;
  std::string source_;
  std::size_t pos_ = 0;
};

// Self-describing parameter file: key/value header plus named float32 tensors,
// followed by an FNV-1a checksum of everything before it.
struct Checkpoint {
  std::string kind;
  std::map<std::string, std::string> header;
  std::vector<std::pair<std::string, nn::Matrix>> tensors;

  const std::string& get(const std::string& key) const;
  int get_int(const std::string& key) const;
  const nn::Matrix& tensor(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Hash of a file's bytes (FNV-1a 64, hex).
std::string file_hash(const std::filesystem::path& path);

void put_parameters(Checkpoint& ckpt, const nn::ParameterList& params, const std::string& prefix = "");
// Copies values into existing parameters; shapes must match.
void get_parameters(const Checkpoint& ckpt, const nn::ParameterList& params, const std::string& prefix = "");

}  // namespace retrikt
