#include "ezsd/image.hpp"

#include <fstream>
#include <string>

namespace ezsd {

void write_ppm(const std::filesystem::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ImageError("cannot write image: " + path.string());
  out << "P6\n" << image.width << " " << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.rgb.data()), static_cast<std::streamsize>(image.rgb.size()));
  if (!out) throw ImageError("failed writing image: " + path.string());
}

namespace {
int read_header_int(std::istream& in) {
  int value = -1;
  in >> std::ws;
  while (in.peek() == '#') {
    std::string comment;
    std::getline(in, comment);
    in >> std::ws;
  }
  in >> value;
  return value;
}
}  // namespace

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open image: " + path.string());
  std::string magic;
  in >> magic;
  if (magic != "P6") throw ImageError("not a binary PPM: " + path.string());
  const int w = read_header_int(in);
  const int h = read_header_int(in);
  const int maxval = read_header_int(in);
  if (w <= 0 || h <= 0 || maxval != 255) throw ImageError("unsupported PPM header: " + path.string());
  in.get();
  Image image(w, h);
  in.read(reinterpret_cast<char*>(image.rgb.data()), static_cast<std::streamsize>(image.rgb.size()));
  if (!in) throw ImageError("truncated PPM: " + path.string());
  return image;
}

}  // namespace ezsd
