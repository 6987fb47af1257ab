#include <dlfcn.h>

#include "ezsd/encoder.hpp"

namespace ezsd {

namespace {
void* require_symbol(void* handle, const char* name, const std::filesystem::path& path) {
  void* sym = dlsym(handle, name);
  if (!sym) throw EncoderError(std::string("encoder plugin ") + path.string() + " lacks symbol " + name);
  return sym;
}
}  // namespace

PluginEncoder::PluginEncoder(const std::filesystem::path& library) : path_(library) {
  handle_ = dlopen(library.c_str(), RTLD_NOW | RTLD_LOCAL);
  if (!handle_) throw EncoderError("cannot load encoder plugin " + library.string() + ": " + dlerror());
  try {
    auto dim_fn = reinterpret_cast<int (*)()>(require_symbol(handle_, "ezsd_plugin_dim", path_));
    auto side_fn = reinterpret_cast<int (*)()>(require_symbol(handle_, "ezsd_plugin_input_side", path_));
    encode_image_ = reinterpret_cast<ImageFn>(require_symbol(handle_, "ezsd_plugin_encode_image", path_));
    encode_text_ = reinterpret_cast<TextFn>(require_symbol(handle_, "ezsd_plugin_encode_text", path_));
    dim_ = dim_fn();
    side_ = side_fn();
    if (dim_ <= 0 || side_ <= 0) throw EncoderError("encoder plugin reports non-positive dimensions");
    if (auto norm_fn = reinterpret_cast<void (*)(float*, float*)>(dlsym(handle_, "ezsd_plugin_channel_norm")))
      norm_fn(norm_.mean, norm_.std);
  } catch (...) {
    dlclose(handle_);
    throw;
  }
}

PluginEncoder::~PluginEncoder() {
  if (handle_) dlclose(handle_);
}

FeatureVector PluginEncoder::encode(const CropTensor& crop) const {
  if (crop.side != side_) throw EncoderError("crop side differs from plugin input side");
  FeatureVector out(dim_);
  if (encode_image_(crop.chw.data(), crop.side, out.data()) != 0)
    throw EncoderError("encoder plugin failed to encode an image crop");
  return out;
}

std::vector<float> PluginEncoder::encode_prompt(const std::string& prompt, const std::string& /*name*/) const {
  std::vector<float> out(dim_);
  if (encode_text_(prompt.c_str(), out.data()) != 0)
    throw EncoderError("encoder plugin failed to encode prompt '" + prompt + "'");
  return out;
}

nlohmann::json PluginEncoder::describe() const { return {{"kind", "plugin"}, {"library", path_.string()}}; }

}  // namespace ezsd
