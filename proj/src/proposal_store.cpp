#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <zlib.h>

#include <json.hpp>

#include "ezsd/proposals.hpp"

namespace ezsd {

static_assert(std::endian::native == std::endian::little, "store blobs are written as native little-endian floats");

namespace {

constexpr int kFormatVersion = 1;

std::string crc_string(const std::vector<char>& bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  std::size_t pos = 0;
  while (pos < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - pos, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + pos), chunk);
    pos += chunk;
  }
  char buf[32];
  std::snprintf(buf, sizeof(buf), "crc32:%08lx", static_cast<unsigned long>(crc));
  return buf;
}

ProposalSource parse_source(const std::string& s) {
  if (s == "anchor") return ProposalSource::kAnchor;
  if (s == "base_gt") return ProposalSource::kBaseGt;
  throw StoreError("unknown proposal source '" + s + "'");
}

}  // namespace

std::filesystem::path store_blob_path(const std::filesystem::path& manifest) {
  auto blob = manifest;
  blob.replace_extension(".bin");
  return blob;
}

void write_store(const std::filesystem::path& manifest, const ProposalStore& store) {
  if (store.dim <= 0 && !store.images.empty()) throw StoreError("store dimension must be positive");
  std::vector<char> blob;
  std::ostringstream lines;
  for (const auto& ip : store.images) {
    nlohmann::json records = nlohmann::json::array();
    const std::uint64_t offset = blob.size();
    for (const auto& p : ip.proposals) {
      if (static_cast<int>(p.feature.size()) != store.dim)
        throw StoreError("proposal feature dimension differs from store dimension");
      records.push_back({{"box", {p.box.x1, p.box.y1, p.box.x2, p.box.y2}},
                         {"objectness", p.objectness},
                         {"pred_category", p.pred_category},
                         {"source", to_string(p.source)}});
      const auto* bytes = reinterpret_cast<const char*>(p.feature.data());
      blob.insert(blob.end(), bytes, bytes + p.feature.size() * sizeof(float));
    }
    lines << nlohmann::json{{"image_id", ip.image_id},
                            {"D", store.dim},
                            {"count", ip.proposals.size()},
                            {"feature_offset", offset},
                            {"records", records}}
                 .dump()
          << "\n";
  }

  const auto blob_path = store_blob_path(manifest);
  std::ofstream bout(blob_path, std::ios::binary | std::ios::trunc);
  if (!bout) throw StoreError("cannot write store blob: " + blob_path.string());
  bout.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!bout) throw StoreError("failed writing store blob: " + blob_path.string());

  std::ofstream mout(manifest, std::ios::trunc);
  if (!mout) throw StoreError("cannot write store manifest: " + manifest.string());
  mout << nlohmann::json{{"format_version", kFormatVersion},
                         {"D", store.dim},
                         {"checksum", crc_string(blob)},
                         {"blob", blob_path.filename().string()},
                         {"bytes", blob.size()},
                         {"images", store.images.size()}}
              .dump()
       << "\n"
       << lines.str();
  if (!mout) throw StoreError("failed writing store manifest: " + manifest.string());
}

ProposalStore read_store(const std::filesystem::path& manifest, std::optional<int> expected_dim) {
  std::ifstream in(manifest);
  if (!in) throw StoreError("cannot open proposal store: " + manifest.string());
  std::string line;
  if (!std::getline(in, line)) throw StoreError("proposal store has no header: " + manifest.string());

  ProposalStore store;
  std::string checksum;
  std::uint64_t declared_bytes = 0;
  try {
    const auto header = nlohmann::json::parse(line);
    const int version = header.at("format_version").get<int>();
    if (version != kFormatVersion)
      throw StoreError("proposal store format version " + std::to_string(version) + " is not supported");
    store.dim = header.at("D").get<int>();
    checksum = header.at("checksum").get<std::string>();
    declared_bytes = header.at("bytes").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw StoreError("malformed store header in " + manifest.string() + ": " + e.what());
  }
  if (expected_dim && *expected_dim != store.dim)
    throw StoreError("proposal store has D=" + std::to_string(store.dim) + " but D=" + std::to_string(*expected_dim) +
                     " was expected");

  const auto blob_path = store_blob_path(manifest);
  std::ifstream bin(blob_path, std::ios::binary);
  if (!bin) throw StoreError("cannot open store blob: " + blob_path.string());
  std::vector<char> blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  if (blob.size() != declared_bytes)
    throw StoreError("store blob is " + std::to_string(blob.size()) + " bytes, header declares " +
                     std::to_string(declared_bytes));
  if (crc_string(blob) != checksum) throw StoreError("store blob checksum mismatch: " + blob_path.string());

  const std::size_t feature_bytes = static_cast<std::size_t>(store.dim) * sizeof(float);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ImageProposals ip;
      ip.image_id = j.at("image_id").get<std::int64_t>();
      if (j.at("D").get<int>() != store.dim) throw StoreError("image record dimension differs from store header");
      const auto count = j.at("count").get<std::size_t>();
      std::size_t offset = j.at("feature_offset").get<std::size_t>();
      const auto& records = j.at("records");
      if (records.size() != count) throw StoreError("image record count disagrees with its records");
      if (offset + count * feature_bytes > blob.size())
        throw StoreError("store blob truncated for image " + std::to_string(ip.image_id));
      for (const auto& r : records) {
        ClipProposal p;
        const auto box = r.at("box").get<std::vector<double>>();
        if (box.size() != 4) throw StoreError("proposal box must have 4 coordinates");
        p.box = {box[0], box[1], box[2], box[3]};
        p.objectness = r.at("objectness").get<double>();
        p.pred_category = r.at("pred_category").get<int>();
        p.source = parse_source(r.at("source").get<std::string>());
        p.feature.resize(store.dim);
        std::memcpy(p.feature.data(), blob.data() + offset, feature_bytes);
        offset += feature_bytes;
        ip.proposals.push_back(std::move(p));
      }
      store.images.push_back(std::move(ip));
    } catch (const nlohmann::json::exception& e) {
      throw StoreError("malformed store record in " + manifest.string() + ": " + e.what());
    }
  }
  return store;
}

}  // namespace ezsd
