#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "hwbd/engine.hpp"
#include "hwbd/error.hpp"

namespace hwbd {

// Checkpoint layout: a text manifest terminated by the line "payload", followed by
// every parameter of the flat view as little-endian IEEE binary32.
//
//   hwbd-checkpoint 1
//   input_shape 1 8 8
//   classes 4
//   layer 0 conv2d stride 1 padding 1
//   param 0 0 6 1 3 3
//   ...
//   flat_order layer,param,row-major
//   parameters 1234
//   payload

namespace detail {

inline void put_f32_le(std::string& out, float v) {
  std::uint32_t bits = std::bit_cast<std::uint32_t>(v);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

inline float get_f32_le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

inline std::string serialize_checkpoint(const Model& model) {
  std::ostringstream manifest;
  manifest << "hwbd-checkpoint 1\ninput_shape";
  for (auto d : model.input_shape) manifest << ' ' << d;
  manifest << "\nclasses " << model.num_classes << '\n';
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const Layer& l = model.layers[i];
    manifest << "layer " << i << ' ' << to_string(l.kind);
    if (l.kind == LayerKind::Conv2d) manifest << " stride " << l.conv.stride << " padding " << l.conv.padding;
    manifest << '\n';
    for (std::size_t j = 0; j < l.params.size(); ++j) {
      manifest << "param " << i << ' ' << j;
      for (auto d : l.params[j].shape()) manifest << ' ' << d;
      manifest << '\n';
    }
  }
  manifest << "flat_order layer,param,row-major\nparameters " << model.parameter_count() << "\npayload\n";
  std::string out = manifest.str();
  for (float v : model.flatten()) detail::put_f32_le(out, v);
  return out;
}

inline Model deserialize_checkpoint(const std::string& bytes) {
  const std::string marker = "\npayload\n";
  const auto end = bytes.find(marker);
  if (end == std::string::npos) throw IoError("checkpoint: missing payload marker");
  std::istringstream manifest(bytes.substr(0, end + 1));
  std::string line;
  Model model;
  std::size_t declared = 0;
  bool header = false;
  while (std::getline(manifest, line)) {
    std::istringstream in(line);
    std::string key;
    in >> key;
    if (key == "hwbd-checkpoint") {
      int version = 0;
      in >> version;
      if (version != 1) throw IoError("checkpoint: unsupported version");
      header = true;
    } else if (key == "input_shape") {
      std::size_t d = 0;
      while (in >> d) model.input_shape.push_back(d);
    } else if (key == "classes") {
      in >> model.num_classes;
    } else if (key == "layer") {
      std::size_t index = 0;
      std::string kind;
      in >> index >> kind;
      if (index != model.layers.size()) throw IoError("checkpoint: layers out of order");
      Layer layer;
      layer.kind = parse_layer_kind(kind);
      std::string k;
      while (in >> k) {
        if (k == "stride") in >> layer.conv.stride;
        else if (k == "padding") in >> layer.conv.padding;
        else throw IoError("checkpoint: unknown layer attribute '" + k + "'");
      }
      model.layers.push_back(std::move(layer));
    } else if (key == "param") {
      std::size_t li = 0, pi = 0, d = 0;
      in >> li >> pi;
      if (li + 1 != model.layers.size() || pi != model.layers.back().params.size()) {
        throw IoError("checkpoint: parameters out of order");
      }
      Shape shape;
      while (in >> d) shape.push_back(d);
      model.layers.back().params.emplace_back(std::move(shape));
    } else if (key == "parameters") {
      in >> declared;
    } else if (key == "flat_order" || key.empty()) {
      continue;
    } else {
      throw IoError("checkpoint: unknown manifest key '" + key + "'");
    }
  }
  if (!header) throw IoError("checkpoint: missing header");
  const std::size_t count = model.parameter_count();
  if (declared != count) throw IoError("checkpoint: parameter count does not match shapes");
  const std::size_t offset = end + marker.size();
  if (bytes.size() - offset != 4 * count) throw IoError("checkpoint: payload length mismatch");
  std::vector<float> flat(count);
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + offset);
  for (std::size_t i = 0; i < count; ++i) flat[i] = detail::get_f32_le(p + 4 * i);
  model.unflatten(flat);
  model.validate();
  return model;
}

inline void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  const std::string bytes = serialize_checkpoint(model);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

inline Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return deserialize_checkpoint(buffer.str());
}

}  // namespace hwbd
