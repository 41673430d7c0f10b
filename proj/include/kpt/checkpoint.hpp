#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "kpt/hourglass.hpp"
#include "kpt/tensor.hpp"

namespace kpt {

inline constexpr int kCheckpointFormatVersion = 1;

/// Tensor record: u32 name length, name bytes, u32 rank, u64 extents, then
/// float32 values; all integers and floats little-endian.
void write_tensor_record(std::ostream& out, const std::string& name, const Tensor& t);
/// Throws IoError naming `context` when the stream ends inside the record.
Tensor read_tensor_record(std::istream& in, std::string& name, const std::string& context);

struct Checkpoint {
  HourglassArch arch;
  std::vector<std::size_t> head_channels;
  std::vector<NamedTensor<float>> tensors;  // parameters and buffers, network order
  nlohmann::json descriptor;                // null when absent

  const NamedTensor<float>* find(const std::string& name) const;
};

/// Layout: "KPTCKPT\n", u64 header length, JSON header {format_version,
/// arch, head_channels, names, descriptor}, one tensor record per name,
/// then "KPTEND" and the u64 record count.
void save_checkpoint(const HourglassNet& net, const std::filesystem::path& path,
                     const nlohmann::json& descriptor = nullptr);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Network with the checkpoint's architecture, heads and values.
HourglassNet instantiate(const Checkpoint& ckpt);

/// Copies values for every tensor name shared by `src` and `net`.
void copy_values(HourglassNet& net, const std::vector<NamedTensor<float>>& src);

/// Appends one JSON record plus newline and flushes.
void append_results(const std::filesystem::path& log, const nlohmann::json& record);
/// Parses every line; a final line without its newline is a partial write.
std::vector<nlohmann::json> read_results(const std::filesystem::path& log);

}  // namespace kpt
