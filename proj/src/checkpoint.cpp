#include "oocr/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

namespace oocr {
namespace {

constexpr char kMagic[4] = {'O', 'O', 'C', 'R'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

class Reader {
 public:
  Reader(std::string bytes, std::string path) : bytes_(std::move(bytes)), path_(std::move(path)) {}

  bool at_end() const { return pos_ == bytes_.size(); }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += 4;
    return v;
  }

  std::string take(std::size_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  [[noreturn]] void fail(const std::string& msg) const {
    throw FormatError("checkpoint '" + path_ + "': " + msg);
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) fail(std::string("truncated while reading ") + what);
  }

  std::string bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::vector<NamedTensor>& tensors, const std::filesystem::path& path) {
  std::set<std::string> names;
  std::string out(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  for (const auto& [name, t] : tensors) {
    if (!names.insert(name).second) {
      throw ContractError("save_checkpoint: duplicate tensor name '" + name + "'");
    }
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float f : t.data()) put_u32(out, std::bit_cast<std::uint32_t>(f));
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw FormatError("checkpoint '" + path.string() + "': cannot open for writing");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw FormatError("checkpoint '" + path.string() + "': write failed");
}

std::vector<NamedTensor> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw FormatError("checkpoint '" + path.string() + "': cannot open");
  std::string bytes((std::istreambuf_iterator<char>(file)), std::istreambuf_iterator<char>());
  Reader r(std::move(bytes), path.string());

  if (r.take(4, "magic") != std::string(kMagic, 4)) r.fail("bad magic bytes");
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) r.fail("unsupported version " + std::to_string(version));

  std::vector<NamedTensor> out;
  std::set<std::string> names;
  while (!r.at_end()) {
    const std::uint32_t name_len = r.u32("name length");
    std::string name = r.take(name_len, "name");
    if (!names.insert(name).second) r.fail("duplicate tensor name '" + name + "'");
    const std::uint32_t rank = r.u32("rank");
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i) shape.push_back(r.u32("dims"));
    std::vector<float> data(shape_numel(shape));
    for (float& f : data) f = std::bit_cast<float>(r.u32("data"));
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return out;
}

}  // namespace oocr
