#pragma once

#include <torch/torch.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "cmi/contrastive/memory_bank.hpp"
#include "cmi/core/checksum.hpp"
#include "cmi/data/dataset.hpp"
#include "cmi/io/png.hpp"

namespace cmi {

namespace fs = std::filesystem;

inline std::string record_filename(std::int64_t id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%08lld.png", static_cast<long long>(id));
  return buf;
}

inline std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path.string() + "'");
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out << text;
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

/// Persists a bank as it grows. Layout:
///   images/<id>.png   one lossless 8-bit image per record
///   index.jsonl       {"id","target","timestamp","teacher_argmax"} per record
///   bank.pt           raw tensors for bit-exact reload (written by finalize)
///   meta.json         counts, shapes, checksum, per-batch provenance
class BankWriter {
 public:
  explicit BankWriter(fs::path dir) : dir_(std::move(dir)) {
    fs::create_directories(dir_ / "images");
    index_.open(dir_ / "index.jsonl", std::ios::binary | std::ios::trunc);
    if (!index_) throw IoError("cannot create index in '" + dir_.string() + "'");
  }

  /// Writes every record of `bank` not yet on disk.
  void sync(const MemoryBank& bank) {
    for (std::int64_t i = written_; i < bank.size(); ++i) {
      const auto rec = bank.record(i);
      write_png(dir_ / "images" / record_filename(i), to_uint8(rec.image));
      nlohmann::json row = {{"id", i}, {"target", rec.target}, {"timestamp", rec.timestamp},
                            {"teacher_argmax", rec.teacher_argmax}};
      index_ << row.dump() << '\n';
    }
    index_.flush();
    if (!index_) throw IoError("failed writing bank index");
    written_ = bank.size();
  }

  /// Completes the directory with the raw archive and metadata.
  void finalize(const MemoryBank& bank) {
    sync(bank);
    index_.close();
    torch::serialize::OutputArchive ar;
    const auto empty = torch::empty({0});
    const auto opt = [&](const torch::Tensor& t) { return t.defined() ? t.contiguous() : empty; };
    ar.write("images", opt(bank.images()));
    ar.write("targets", opt(bank.targets()));
    ar.write("teacher_logits", opt(bank.teacher_logits()));
    ar.write("features", opt(bank.features()));
    ar.write("timestamps", opt(bank.timestamps()));
    ar.write("num_classes", torch::tensor({bank.num_classes()}, torch::kLong));
    ar.save_to((dir_ / "bank.pt").string());

    nlohmann::json batches = nlohmann::json::array();
    for (const auto& b : bank.batches()) {
      batches.push_back({{"timestamp", b.timestamp}, {"offset", b.offset}, {"size", b.size},
                         {"generator_seed", b.generator_seed}, {"generator_checksum", to_hex(b.generator_checksum)}});
    }
    nlohmann::json meta = {{"num_records", bank.size()}, {"num_classes", bank.num_classes()},
                           {"checksum", to_hex(bank.checksum())}, {"batches", batches}};
    if (bank.size() > 0) meta["image_shape"] = bank.images().sizes().slice(1).vec();
    write_text_file(dir_ / "meta.json", meta.dump(2) + "\n");
  }

  const fs::path& dir() const { return dir_; }

 private:
  fs::path dir_;
  std::ofstream index_;
  std::int64_t written_ = 0;
};

inline void save_bank(const MemoryBank& bank, const fs::path& dir) {
  BankWriter w(dir);
  w.finalize(bank);
}

struct IndexRow {
  std::int64_t id = 0, target = 0, timestamp = 0, teacher_argmax = -1;
};

/// Parses index.jsonl; any malformed or out-of-order row is an IoError.
inline std::vector<IndexRow> read_bank_index(const fs::path& dir) {
  std::ifstream in(dir / "index.jsonl");
  if (!in) throw IoError("bank index missing in '" + dir.string() + "'");
  std::vector<IndexRow> rows;
  std::string line;
  std::int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      IndexRow r{j.at("id").get<std::int64_t>(), j.at("target").get<std::int64_t>(),
                 j.at("timestamp").get<std::int64_t>(), j.at("teacher_argmax").get<std::int64_t>()};
      if (r.id != static_cast<std::int64_t>(rows.size())) throw IoError("non-sequential id");
      if (!rows.empty() && r.timestamp < rows.back().timestamp) throw IoError("timestamps decrease");
      rows.push_back(r);
    } catch (const std::exception& e) {
      throw IoError("corrupt bank index line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return rows;
}

inline std::uint64_t bank_index_checksum(const fs::path& dir) { return checksum(read_text_file(dir / "index.jsonl")); }

/// Reloads a bank: bit-exact from bank.pt when present, otherwise decoded
/// from the PNG records (8-bit quantized, no cached logits or features).
inline MemoryBank load_bank(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("bank directory '" + dir.string() + "' does not exist");
  const auto rows = read_bank_index(dir);
  const auto raw = dir / "bank.pt";
  if (fs::exists(raw)) {
    torch::serialize::InputArchive ar;
    ar.load_from(raw.string());
    torch::Tensor images, targets, logits, features, timestamps, nc;
    ar.read("images", images);
    ar.read("targets", targets);
    ar.read("teacher_logits", logits);
    ar.read("features", features);
    ar.read("timestamps", timestamps);
    ar.read("num_classes", nc);
    if (images.numel() == 0) return MemoryBank(nc.item<std::int64_t>());
    if (images.size(0) != static_cast<std::int64_t>(rows.size())) {
      throw IoError("bank archive and index disagree on the record count");
    }
    return MemoryBank::from_arrays(nc.item<std::int64_t>(), images, targets, logits, features, timestamps);
  }
  std::int64_t num_classes = 0;
  if (fs::exists(dir / "meta.json")) {
    num_classes = nlohmann::json::parse(read_text_file(dir / "meta.json")).value("num_classes", 0);
  }
  if (rows.empty()) return MemoryBank(num_classes);
  std::vector<torch::Tensor> imgs;
  imgs.reserve(rows.size());
  auto targets = torch::empty({static_cast<std::int64_t>(rows.size())}, torch::kLong);
  auto timestamps = torch::empty_like(targets);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    imgs.push_back(from_uint8(read_png(dir / "images" / record_filename(rows[i].id))));
    targets[static_cast<std::int64_t>(i)] = rows[i].target;
    timestamps[static_cast<std::int64_t>(i)] = rows[i].timestamp;
  }
  return MemoryBank::from_arrays(num_classes, torch::stack(imgs), targets, {}, {}, timestamps);
}

}  // namespace cmi
