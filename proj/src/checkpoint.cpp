#include "kpt/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "kpt/error.hpp"

namespace kpt {

namespace {

constexpr char kMagic[] = "KPTCKPT\n";
constexpr char kTrailer[] = "KPTEND";

template <class U>
void put_le(std::ostream& out, U v) {
  char b[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  out.write(b, sizeof(U));
}

template <class U>
bool get_le(std::istream& in, U& v) {
  unsigned char b[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(U))) return false;
  v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(b[i]) << (8 * i);
  return true;
}

[[noreturn]] void truncated(const std::string& context) {
  throw IoError("checkpoint truncated or corrupt in " + context);
}

}  // namespace

void write_tensor_record(std::ostream& out, const std::string& name, const Tensor& t) {
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim()));
  for (auto e : t.shape()) put_le<std::uint64_t>(out, e);
  for (float v : t.data()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
}

Tensor read_tensor_record(std::istream& in, std::string& name, const std::string& context) {
  std::uint32_t len = 0;
  if (!get_le(in, len) || len > (1u << 16)) truncated(context);
  name.assign(len, '\0');
  if (!in.read(name.data(), len)) truncated(context);
  std::uint32_t rank = 0;
  if (!get_le(in, rank) || rank > 8) truncated(context + " (" + name + ")");
  Shape shape(rank);
  std::uint64_t numel = 1;
  for (auto& e : shape) {
    std::uint64_t v = 0;
    if (!get_le(in, v) || v == 0 || v > (1ull << 32)) truncated(context + " (" + name + ")");
    e = v;
    numel *= v;
  }
  if (numel > (1ull << 32)) truncated(context + " (" + name + ")");
  std::vector<float> values(numel);
  for (auto& v : values) {
    std::uint32_t bits = 0;
    if (!get_le(in, bits)) truncated(context + " (" + name + ")");
    v = std::bit_cast<float>(bits);
  }
  return Tensor::from_data(std::move(shape), std::move(values));
}

const NamedTensor<float>* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

void save_checkpoint(const HourglassNet& net, const std::filesystem::path& path,
                     const nlohmann::json& descriptor) {
  auto names = nlohmann::json::array();
  auto buffers = nlohmann::json::array();
  for (const auto& t : net.tensors()) {
    names.push_back(t.name);
    if (t.is_buffer) buffers.push_back(t.name);
  }
  nlohmann::json header = {{"format_version", kCheckpointFormatVersion},
                           {"arch", net.arch()},
                           {"head_channels", net.head_channels()},
                           {"names", names},
                           {"buffers", buffers},
                           {"descriptor", descriptor}};
  const auto text = header.dump();
  std::ostringstream body(std::ios::binary);
  body.write(kMagic, sizeof kMagic - 1);
  put_le<std::uint64_t>(body, text.size());
  body << text;
  for (const auto& t : net.tensors()) write_tensor_record(body, t.name, t.tensor);
  body.write(kTrailer, sizeof kTrailer - 1);
  put_le<std::uint64_t>(body, net.tensors().size());

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  const auto bytes = body.str();
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[sizeof kMagic - 1];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0)
    throw IoError(path.string() + " is not a checkpoint (bad magic)");
  std::uint64_t header_len = 0;
  if (!get_le(in, header_len) || header_len > (1ull << 30)) truncated("header of " + path.string());
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len))) truncated("header of " + path.string());

  Checkpoint ck;
  std::vector<std::string> names;
  std::vector<std::string> buffer_names;
  try {
    const auto header = nlohmann::json::parse(text);
    const int version = header.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion)
      throw InconsistentError("checkpoint " + path.string() + " has format version " + std::to_string(version) +
                              ", this build reads version " + std::to_string(kCheckpointFormatVersion));
    ck.arch = header.at("arch").get<HourglassArch>();
    ck.head_channels = header.at("head_channels").get<std::vector<std::size_t>>();
    names = header.at("names").get<std::vector<std::string>>();
    buffer_names = header.at("buffers").get<std::vector<std::string>>();
    ck.descriptor = header.at("descriptor");
  } catch (const nlohmann::json::exception& e) {
    throw IoError("checkpoint header of " + path.string() + " is malformed: " + e.what());
  }

  for (std::size_t i = 0; i < names.size(); ++i) {
    std::string name;
    const auto context = "record " + std::to_string(i) + " '" + names[i] + "' of " + path.string();
    auto t = read_tensor_record(in, name, context);
    if (name != names[i]) throw IoError("checkpoint " + context + " holds tensor '" + name + "'");
    const bool buffer = std::find(buffer_names.begin(), buffer_names.end(), name) != buffer_names.end();
    ck.tensors.push_back({name, std::move(t), buffer});
  }
  char trailer[sizeof kTrailer - 1];
  std::uint64_t count = 0;
  if (!in.read(trailer, sizeof trailer) || std::memcmp(trailer, kTrailer, sizeof trailer) != 0 ||
      !get_le(in, count))
    truncated("trailer of " + path.string());
  if (count != names.size()) throw IoError("checkpoint " + path.string() + " trailer count mismatch");
  if (in.peek() != std::char_traits<char>::eof()) throw IoError("checkpoint " + path.string() + " has trailing bytes");
  return ck;
}

void copy_values(HourglassNet& net, const std::vector<NamedTensor<float>>& src) {
  for (const auto& s : src) {
    for (const auto& t : net.tensors()) {
      if (t.name != s.name) continue;
      if (t.tensor.shape() != s.tensor.shape())
        throw InconsistentError("tensor '" + s.name + "' has shape " + shape_str(s.tensor.shape()) +
                                " in the source but " + shape_str(t.tensor.shape()) + " in the network");
      auto dst = t.tensor;
      std::copy(s.tensor.data().begin(), s.tensor.data().end(), dst.mutable_data().begin());
    }
  }
}

HourglassNet instantiate(const Checkpoint& ckpt) {
  auto net = HourglassNet::build(ckpt.arch, 0, ckpt.head_channels);
  if (net.tensors().size() != ckpt.tensors.size())
    throw InconsistentError("checkpoint holds " + std::to_string(ckpt.tensors.size()) +
                            " tensors but its architecture defines " + std::to_string(net.tensors().size()));
  for (const auto& t : net.tensors())
    if (!ckpt.find(t.name)) throw InconsistentError("checkpoint lacks tensor '" + t.name + "'");
  copy_values(net, ckpt.tensors);
  return net;
}

void append_results(const std::filesystem::path& log, const nlohmann::json& record) {
  std::ofstream out(log, std::ios::binary | std::ios::app);
  if (!out) throw IoError("cannot append to results log " + log.string());
  out << record.dump() << '\n';
  out.flush();
  if (!out) throw IoError("failed appending to results log " + log.string());
}

std::vector<nlohmann::json> read_results(const std::filesystem::path& log) {
  std::ifstream in(log, std::ios::binary);
  if (!in) throw IoError("cannot open results log " + log.string());
  std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<nlohmann::json> out;
  std::size_t pos = 0, line = 1;
  while (pos < all.size()) {
    const auto nl = all.find('\n', pos);
    if (nl == std::string::npos)
      throw IoError("results log " + log.string() + " ends with a partial record at line " + std::to_string(line));
    try {
      out.push_back(nlohmann::json::parse(all.substr(pos, nl - pos)));
    } catch (const nlohmann::json::exception& e) {
      throw IoError("results log " + log.string() + " line " + std::to_string(line) + ": " + e.what());
    }
    pos = nl + 1;
    ++line;
  }
  return out;
}

}  // namespace kpt
