#pragma once

#include <curl/curl.h>
#include <openssl/evp.h>
#include <torch/torch.h>
#include <zlib.h>

#include <algorithm>
#include <array>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>

#include "cmi/data/dataset.hpp"

namespace cmi {

namespace fs = std::filesystem;

enum class CifarVariant { cifar10, cifar100 };
enum class CifarSplit { train, test };

struct CifarArchive {
  const char* url;
  const char* filename;
  const char* md5;
  const char* folder;
};

inline CifarArchive cifar_archive(CifarVariant v) {
  if (v == CifarVariant::cifar10) {
    return {"https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz", "cifar-10-binary.tar.gz",
            "c32a1d4ab5d03f1284b67883e8d87530", "cifar-10-batches-bin"};
  }
  return {"https://www.cs.toronto.edu/~kriz/cifar-100-binary.tar.gz", "cifar-100-binary.tar.gz",
          "03b5dce01913d631647c71ecec9e9cb8", "cifar-100-binary"};
}

/// Hex MD5 of a file's contents.
inline std::string md5_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_md5(), nullptr) != 1) throw IoError("md5 initialization failed");
  std::array<char, 1 << 16> buf{};
  while (in) {
    in.read(buf.data(), buf.size());
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md.data(), &len);
  std::string hex;
  static const char* digits = "0123456789abcdef";
  for (unsigned int i = 0; i < len; ++i) {
    hex.push_back(digits[md[i] >> 4]);
    hex.push_back(digits[md[i] & 15]);
  }
  return hex;
}

namespace detail {

inline std::size_t curl_write_file(char* ptr, std::size_t size, std::size_t n, void* user) {
  return std::fwrite(ptr, size, n, static_cast<std::FILE*>(user)) * size;
}

}  // namespace detail

inline void download_file(const std::string& url, const fs::path& dest) {
  const auto tmp = dest.string() + ".part";
  std::FILE* f = std::fopen(tmp.c_str(), "wb");
  if (f == nullptr) throw IoError("cannot write '" + tmp + "'");
  CURL* curl = curl_easy_init();
  if (curl == nullptr) {
    std::fclose(f);
    throw IoError("curl initialization failed");
  }
  curl_easy_setopt(curl, CURLOPT_URL, url.c_str());
  curl_easy_setopt(curl, CURLOPT_FOLLOWLOCATION, 1L);
  curl_easy_setopt(curl, CURLOPT_FAILONERROR, 1L);
  curl_easy_setopt(curl, CURLOPT_WRITEFUNCTION, detail::curl_write_file);
  curl_easy_setopt(curl, CURLOPT_WRITEDATA, f);
  const auto rc = curl_easy_perform(curl);
  curl_easy_cleanup(curl);
  std::fclose(f);
  if (rc != CURLE_OK) {
    fs::remove(tmp);
    throw IoError("download of " + url + " failed: " + curl_easy_strerror(rc));
  }
  fs::rename(tmp, dest);
}

/// Extracts regular files from a gzip-compressed ustar archive into `dest`.
/// Entries that would escape `dest` are rejected.
inline void extract_tar_gz(const fs::path& archive, const fs::path& dest) {
  gzFile gz = gzopen(archive.c_str(), "rb");
  if (gz == nullptr) throw IoError("cannot open '" + archive.string() + "'");
  std::unique_ptr<gzFile_s, decltype(&gzclose)> guard(gz, gzclose);
  std::array<char, 512> block{};
  std::vector<char> data;
  const auto read_exact = [&](char* out, std::size_t n) {
    std::size_t got = 0;
    while (got < n) {
      const int r = gzread(gz, out + got, static_cast<unsigned>(std::min<std::size_t>(n - got, 1u << 20)));
      if (r <= 0) throw IoError("truncated archive '" + archive.string() + "'");
      got += static_cast<std::size_t>(r);
    }
  };
  while (true) {
    read_exact(block.data(), block.size());
    if (std::all_of(block.begin(), block.end(), [](char c) { return c == 0; })) break;
    std::string name(block.data(), strnlen(block.data(), 100));
    const std::string prefix(block.data() + 345, strnlen(block.data() + 345, 155));
    if (!prefix.empty()) name = prefix + "/" + name;
    const auto size = std::stoull(std::string(block.data() + 124, strnlen(block.data() + 124, 12)), nullptr, 8);
    const char type = block[156];
    const auto padded = (size + 511) / 512 * 512;
    data.resize(padded);
    if (padded > 0) read_exact(data.data(), padded);
    const auto rel = fs::path(name).lexically_normal();
    if (rel.is_absolute() || (!rel.empty() && *rel.begin() == "..")) {
      throw IoError("archive entry escapes the destination: " + name);
    }
    if (type == '5') {
      fs::create_directories(dest / rel);
    } else if (type == '0' || type == '\0') {
      fs::create_directories((dest / rel).parent_path());
      std::ofstream out(dest / rel, std::ios::binary);
      out.write(data.data(), static_cast<std::streamsize>(size));
      if (!out) throw IoError("cannot write '" + (dest / rel).string() + "'");
    }
  }
}

/// Makes sure the extracted binary files exist under `root`, downloading and
/// verifying the archive if needed. Returns the extracted folder.
inline fs::path ensure_cifar(const fs::path& root, CifarVariant v, bool allow_download = true) {
  const auto a = cifar_archive(v);
  const auto folder = root / a.folder;
  if (fs::is_directory(folder)) return folder;
  fs::create_directories(root);
  const auto tarball = root / a.filename;
  if (!fs::exists(tarball)) {
    if (!allow_download) throw IoError("CIFAR archive not found under '" + root.string() + "'");
    download_file(a.url, tarball);
  }
  const auto md5 = md5_file(tarball);
  if (md5 != a.md5) {
    throw IoError("checksum mismatch for '" + tarball.string() + "': expected " + a.md5 + ", got " + md5);
  }
  extract_tar_gz(tarball, root);
  if (!fs::is_directory(folder)) throw IoError("archive did not contain '" + std::string(a.folder) + "'");
  return folder;
}

/// Parses CIFAR binary record files (label byte(s) + 3x32x32 planes).
/// CIFAR-100 uses the fine label.
inline LabeledImages read_cifar_binary(const std::vector<fs::path>& files, CifarVariant v) {
  const std::size_t label_bytes = v == CifarVariant::cifar10 ? 1 : 2;
  const std::size_t rec = label_bytes + 3 * 32 * 32;
  std::vector<std::uint8_t> pixels;
  std::vector<std::int64_t> labels;
  for (const auto& f : files) {
    const auto bytes = fs::file_size(f);
    if (bytes % rec != 0) throw IoError("'" + f.string() + "' is not a CIFAR binary file");
    std::ifstream in(f, std::ios::binary);
    std::vector<char> buf(bytes);
    in.read(buf.data(), static_cast<std::streamsize>(bytes));
    if (!in) throw IoError("cannot read '" + f.string() + "'");
    for (std::size_t off = 0; off < bytes; off += rec) {
      labels.push_back(static_cast<std::uint8_t>(buf[off + label_bytes - 1]));
      pixels.insert(pixels.end(), buf.begin() + static_cast<std::ptrdiff_t>(off + label_bytes),
                    buf.begin() + static_cast<std::ptrdiff_t>(off + rec));
    }
  }
  const auto n = static_cast<std::int64_t>(labels.size());
  if (n == 0) throw EmptyDataset("no CIFAR records read");
  auto u8 = torch::from_blob(pixels.data(), {n, 3, 32, 32}, torch::kUInt8).clone();
  return {from_uint8(u8), torch::tensor(labels, torch::kLong), v == CifarVariant::cifar10 ? 10 : 100};
}

inline LabeledImages load_cifar(const fs::path& root, CifarVariant v, CifarSplit split, bool allow_download = true) {
  const auto folder = ensure_cifar(root, v, allow_download);
  std::vector<fs::path> files;
  if (v == CifarVariant::cifar10) {
    if (split == CifarSplit::train) {
      for (int i = 1; i <= 5; ++i) files.push_back(folder / ("data_batch_" + std::to_string(i) + ".bin"));
    } else {
      files.push_back(folder / "test_batch.bin");
    }
  } else {
    files.push_back(folder / (split == CifarSplit::train ? "train.bin" : "test.bin"));
  }
  return read_cifar_binary(files, v);
}

}  // namespace cmi
