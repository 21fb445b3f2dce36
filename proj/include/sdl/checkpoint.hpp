#pragma once

// Checkpoint container:
//
//   line 1   "SDL1"
//   line 2   one-line JSON header: network spec, step, seed, init scheme and
//            "arrays": [{"name", "rows", "cols"}, ...] in for_each_tensor order
//   payload  little-endian IEEE-754 float64 values of every array, row-major,
//            concatenated in the declared order; nothing follows the payload

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"  // vendored nlohmann/json

#include "sdl/error.hpp"
#include "sdl/network.hpp"

namespace sdl {

inline constexpr const char* kCheckpointMagic = "SDL1";

struct CheckpointMeta {
  std::uint64_t step = 0;
  std::uint64_t seed = 0;
  std::string init = "kaiming_gaussian";
};

namespace detail {

inline void put_le64(std::ostream& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(buf), 8);
}

inline double get_le64(const unsigned char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace detail

inline nlohmann::ordered_json spec_to_json(const NetworkSpec& spec) {
  nlohmann::ordered_json j;
  j["input_dim"] = spec.input_dim;
  j["hidden_width"] = spec.hidden_width;
  j["mlp_width"] = spec.mlp_width;
  j["num_blocks"] = spec.num_blocks;
  j["num_classes"] = spec.num_classes;
  j["activation"] = activation_name(spec.activation);
  j["use_zeroth_bias"] = spec.use_zeroth_bias;
  j["use_layernorm"] = spec.use_layernorm;
  j["use_skip"] = spec.use_skip;
  return j;
}

inline NetworkSpec spec_from_json(const nlohmann::json& j) {
  NetworkSpec s;
  s.input_dim = j.at("input_dim").get<std::size_t>();
  s.hidden_width = j.at("hidden_width").get<std::size_t>();
  s.mlp_width = j.at("mlp_width").get<std::size_t>();
  s.num_blocks = j.at("num_blocks").get<std::size_t>();
  s.num_classes = j.at("num_classes").get<std::size_t>();
  s.activation = parse_activation(j.at("activation").get<std::string>());
  s.use_zeroth_bias = j.at("use_zeroth_bias").get<bool>();
  s.use_layernorm = j.at("use_layernorm").get<bool>();
  s.use_skip = j.at("use_skip").get<bool>();
  s.validate();
  return s;
}

inline void write_checkpoint(std::ostream& out, const Parameters& params, const CheckpointMeta& meta) {
  nlohmann::ordered_json header;
  header["format"] = kCheckpointMagic;
  header["step"] = meta.step;
  header["seed"] = meta.seed;
  header["init"] = meta.init;
  header["spec"] = spec_to_json(params.spec);
  nlohmann::ordered_json arrays = nlohmann::ordered_json::array();
  for_each_tensor(params, [&](const auto& t) {
    arrays.push_back({{"name", t.name}, {"rows", t.rows}, {"cols", t.cols}});
  });
  header["arrays"] = std::move(arrays);
  out << kCheckpointMagic << '\n' << header.dump() << '\n';
  for_each_tensor(params, [&](const auto& t) {
    for (double v : t.values) detail::put_le64(out, v);
  });
  if (!out) fail(ErrorKind::Io, "write_checkpoint: stream failure");
}

inline void save_checkpoint(const std::string& path, const Parameters& params, const CheckpointMeta& meta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot open checkpoint for writing: " + path);
  write_checkpoint(out, params, meta);
}

struct Checkpoint {
  Parameters params;
  CheckpointMeta meta;
};

inline Checkpoint read_checkpoint(std::istream& in) {
  std::string magic;
  if (!std::getline(in, magic) || magic != kCheckpointMagic)
    fail(ErrorKind::Data, "checkpoint: missing SDL1 magic at offset 0");
  std::string header_line;
  if (!std::getline(in, header_line)) fail(ErrorKind::Data, "checkpoint: missing header line");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(header_line);
  } catch (const std::exception& e) {
    fail(ErrorKind::Data, std::string("checkpoint: malformed header: ") + e.what());
  }
  Checkpoint ck;
  try {
    ck.meta.step = header.at("step").get<std::uint64_t>();
    ck.meta.seed = header.at("seed").get<std::uint64_t>();
    ck.meta.init = header.at("init").get<std::string>();
    ck.params = zero_parameters(spec_from_json(header.at("spec")));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::Data, std::string("checkpoint: bad header field: ") + e.what());
  }
  const auto& arrays = header.at("arrays");
  std::size_t idx = 0;
  const std::size_t payload_offset = magic.size() + 1 + header_line.size() + 1;
  std::size_t consumed = 0;
  std::vector<unsigned char> buf;
  for_each_tensor(ck.params, [&](const auto& t) {
    if (idx >= arrays.size()) fail(ErrorKind::Data, "checkpoint: header lists too few arrays");
    const auto& a = arrays[idx++];
    if (a.at("name").get<std::string>() != t.name || a.at("rows").get<std::size_t>() != t.rows ||
        a.at("cols").get<std::size_t>() != t.cols)
      fail(ErrorKind::Data, "checkpoint: array " + std::to_string(idx - 1) + " does not match spec (expected " +
                                t.name + ")");
    buf.resize(8 * t.values.size());
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(in.gcount()) != buf.size())
      fail(ErrorKind::Data, "checkpoint: truncated payload at offset " +
                                std::to_string(payload_offset + consumed + static_cast<std::size_t>(in.gcount())));
    for (std::size_t i = 0; i < t.values.size(); ++i) t.values[i] = detail::get_le64(buf.data() + 8 * i);
    consumed += buf.size();
  });
  if (idx != arrays.size()) fail(ErrorKind::Data, "checkpoint: header lists extra arrays");
  if (in.peek() != std::char_traits<char>::eof())
    fail(ErrorKind::Data, "checkpoint: trailing bytes after payload at offset " + std::to_string(payload_offset + consumed));
  for_each_tensor(ck.params, [&](const auto& t) {
    if (!all_finite(t.values)) fail(ErrorKind::Data, "checkpoint: non-finite value in " + t.name);
  });
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open checkpoint: " + path);
  return read_checkpoint(in);
}

}  // namespace sdl
