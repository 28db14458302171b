#pragma once

#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "caps/capsnet.hpp"
#include "caps/errors.hpp"

// Self-describing binary model container: magic "CAPS", format version, a
// structured-text config descriptor, then named tensor records. All
// multi-byte integers little-endian; tensor payloads are little-endian f32.

namespace caps {

namespace ckpt {

constexpr char kMagic[4] = {'C', 'A', 'P', 'S'};
constexpr std::uint32_t kVersion = 1;
constexpr std::uint8_t kDtypeF32 = 0;

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_f32(std::string& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw FormatError("truncated checkpoint");
  }
  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(buf[pos++]);
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = 0;
    for (int i = 0; i < 2; ++i)
      v |= static_cast<std::uint16_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

// Flat key=value descriptor; order is fixed so serialization is stable.
inline std::string describe(const CapsNetConfig& cfg) {
  std::ostringstream os;
  const char* kind = cfg.kind == ModelKind::capsnet ? "capsnet"
                     : cfg.kind == ModelKind::cnn_cr ? "cnn_cr"
                                                     : "cnn_r";
  os << "kind=" << kind << "\n";
  os << "in=" << cfg.in_channels << "x" << cfg.in_h << "x" << cfg.in_w << "\n";
  os << "backbone=";
  for (std::size_t i = 0; i < cfg.backbone.size(); ++i) {
    const auto& l = cfg.backbone[i];
    const char* act = l.act == Activation::relu ? "relu"
                      : l.act == Activation::sigmoid ? "sigmoid"
                                                     : "linear";
    os << (i ? ";" : "") << "C" << l.channels << ",K" << l.kernel << ",S"
       << l.stride << "," << act;
  }
  os << "\n";
  os << "primary=" << cfg.num_primary << "x" << cfg.primary_dim << "\n";
  os << "classes=" << cfg.num_classes << "\n";
  os << "out_dim=" << cfg.out_dim << "\n";
  os << "routing_iters=" << cfg.routing_iters << "\n";
  os << "recon=";
  for (std::size_t i = 0; i < cfg.recon_hidden.size(); ++i)
    os << (i ? ";" : "") << cfg.recon_hidden[i];
  os << "\n";
  return os.str();
}

inline CapsNetConfig parse_descriptor(const std::string& text) {
  CapsNetConfig cfg;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    if (key == "kind") {
      if (val == "capsnet") cfg.kind = ModelKind::capsnet;
      else if (val == "cnn_cr") cfg.kind = ModelKind::cnn_cr;
      else if (val == "cnn_r") cfg.kind = ModelKind::cnn_r;
      else throw FormatError("unknown model kind " + val);
    } else if (key == "in") {
      if (std::sscanf(val.c_str(), "%ldx%ldx%ld", &cfg.in_channels, &cfg.in_h,
                      &cfg.in_w) != 3)
        throw FormatError("bad input descriptor " + val);
    } else if (key == "backbone") {
      std::istringstream ls(val);
      std::string item;
      while (std::getline(ls, item, ';')) {
        ConvSpec spec;
        char act[16] = {0};
        if (std::sscanf(item.c_str(), "C%ld,K%ld,S%ld,%15s", &spec.channels,
                        &spec.kernel, &spec.stride, act) != 4)
          throw FormatError("bad backbone layer " + item);
        const std::string a = act;
        spec.act = a == "relu" ? Activation::relu
                   : a == "sigmoid" ? Activation::sigmoid
                                    : Activation::linear;
        cfg.backbone.push_back(spec);
      }
    } else if (key == "primary") {
      if (std::sscanf(val.c_str(), "%ldx%ld", &cfg.num_primary,
                      &cfg.primary_dim) != 2)
        throw FormatError("bad primary descriptor " + val);
    } else if (key == "classes") {
      cfg.num_classes = std::stoll(val);
    } else if (key == "out_dim") {
      cfg.out_dim = std::stoll(val);
    } else if (key == "routing_iters") {
      cfg.routing_iters = std::stoll(val);
    } else if (key == "recon") {
      std::istringstream ls(val);
      std::string item;
      while (std::getline(ls, item, ';'))
        if (!item.empty()) cfg.recon_hidden.push_back(std::stoll(item));
    }
  }
  return cfg;
}

}  // namespace ckpt

template <typename S>
std::string save_checkpoint(const Model<S>& model) {
  std::string out;
  out.append(ckpt::kMagic, 4);
  ckpt::put_u32(out, ckpt::kVersion);
  const std::string desc = ckpt::describe(model.cfg);
  ckpt::put_u32(out, static_cast<std::uint32_t>(desc.size()));
  out += desc;
  ckpt::put_u32(out, static_cast<std::uint32_t>(model.params.size()));
  for (const auto& p : model.params) {
    ckpt::put_u16(out, static_cast<std::uint16_t>(p.name.size()));
    out += p.name;
    out.push_back(static_cast<char>(ckpt::kDtypeF32));
    out.push_back(static_cast<char>(p.value.rank()));
    for (auto d : p.value.shape())
      ckpt::put_u32(out, static_cast<std::uint32_t>(d));
    for (std::int64_t i = 0; i < p.value.numel(); ++i)
      ckpt::put_f32(out, static_cast<float>(p.value[i]));
  }
  return out;
}

template <typename S>
Model<S> load_checkpoint(const std::string& bytes) {
  ckpt::Reader r{bytes};
  const std::string magic = r.bytes(4);
  if (std::memcmp(magic.data(), ckpt::kMagic, 4) != 0)
    throw FormatError("bad checkpoint magic");
  const std::uint32_t version = r.u32();
  if (version != ckpt::kVersion)
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t desc_len = r.u32();
  const CapsNetConfig cfg = ckpt::parse_descriptor(r.bytes(desc_len));
  cfg.validate();

  Model<S> model;
  model.cfg = cfg;
  const std::uint32_t count = r.u32();
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::uint16_t name_len = r.u16();
    const std::string name = r.bytes(name_len);
    const std::uint8_t dtype = r.u8();
    if (dtype != ckpt::kDtypeF32)
      throw FormatError("unsupported dtype tag " + std::to_string(dtype));
    const std::uint8_t rank = r.u8();
    Shape shape(rank);
    for (std::uint8_t i = 0; i < rank; ++i)
      shape[i] = static_cast<std::int64_t>(r.u32());
    Tensor<S> tensor(shape);
    for (std::int64_t i = 0; i < tensor.numel(); ++i)
      tensor[i] = static_cast<S>(r.f32());
    model.add_param(name, std::move(tensor));
  }

  // The descriptor decides the architecture; every expected tensor must be
  // present with the right shape.
  std::vector<std::string> missing;
  for (const auto& [name, shape] : parameter_layout(cfg)) {
    if (!model.has_param(name)) {
      missing.push_back(name);
      continue;
    }
    if (model.param(name).shape() != shape)
      throw IncompatibilityError(
          "tensor " + name + " shaped " + shape_str(model.param(name).shape()) +
          ", architecture expects " + shape_str(shape));
  }
  if (!missing.empty()) {
    std::string msg = "checkpoint missing tensors:";
    for (const auto& m : missing) msg += " " + m;
    throw IncompatibilityError(msg, missing);
  }
  if (model.params.size() != parameter_layout(cfg).size())
    throw IncompatibilityError("checkpoint holds tensors unknown to the architecture");
  return model;
}

template <typename S>
void save_checkpoint_file(const Model<S>& model, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path);
  const std::string bytes = save_checkpoint(model);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

template <typename S>
Model<S> load_checkpoint_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return load_checkpoint<S>(ss.str());
}

// ---------------------------------------------------------------------------
// Plain named-tensor container (same record layout, magic "CTNS"); used for
// adversarial example sets and similar bulk outputs.
// ---------------------------------------------------------------------------

namespace ckpt {
constexpr char kTensorsMagic[4] = {'C', 'T', 'N', 'S'};
}

template <typename S>
void save_tensors_file(
    const std::vector<std::pair<std::string, Tensor<S>>>& tensors,
    const std::string& path) {
  std::string out;
  out.append(ckpt::kTensorsMagic, 4);
  ckpt::put_u32(out, ckpt::kVersion);
  ckpt::put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    ckpt::put_u16(out, static_cast<std::uint16_t>(name.size()));
    out += name;
    out.push_back(static_cast<char>(ckpt::kDtypeF32));
    out.push_back(static_cast<char>(tensor.rank()));
    for (auto d : tensor.shape())
      ckpt::put_u32(out, static_cast<std::uint32_t>(d));
    for (std::int64_t i = 0; i < tensor.numel(); ++i)
      ckpt::put_f32(out, static_cast<float>(tensor[i]));
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

template <typename S>
std::vector<std::pair<std::string, Tensor<S>>> load_tensors_file(
    const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string buf = ss.str();
  ckpt::Reader r{buf};
  if (std::memcmp(r.bytes(4).data(), ckpt::kTensorsMagic, 4) != 0)
    throw FormatError("bad tensor container magic in " + path);
  if (r.u32() != ckpt::kVersion)
    throw FormatError("unsupported tensor container version");
  const std::uint32_t count = r.u32();
  std::vector<std::pair<std::string, Tensor<S>>> out;
  for (std::uint32_t t = 0; t < count; ++t) {
    const std::string name = r.bytes(r.u16());
    if (r.u8() != ckpt::kDtypeF32) throw FormatError("unsupported dtype tag");
    const std::uint8_t rank = r.u8();
    Shape shape(rank);
    for (std::uint8_t i = 0; i < rank; ++i)
      shape[i] = static_cast<std::int64_t>(r.u32());
    Tensor<S> tensor(shape);
    for (std::int64_t i = 0; i < tensor.numel(); ++i)
      tensor[i] = static_cast<S>(r.f32());
    out.emplace_back(name, std::move(tensor));
  }
  return out;
}

}  // namespace caps
