#pragma once

#include <torch/torch.h>

#include <charconv>
#include <cstring>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>

#include "cmi/core/errors.hpp"
#include "cmi/core/random.hpp"
#include "cmi/models/classifier.hpp"
#include "cmi/models/resnet.hpp"
#include "cmi/models/toycnn.hpp"
#include "cmi/models/vgg.hpp"
#include "cmi/models/wide_resnet.hpp"

namespace cmi {

namespace detail {

inline bool parse_int(std::string_view s, int& out) {
  const auto* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc{} && ptr == end;
}

// "wrn-16-1" -> (16, 1)
inline bool parse_wrn(const std::string& name, int& depth, int& widen) {
  if (name.rfind("wrn-", 0) != 0) return false;
  const auto rest = std::string_view(name).substr(4);
  const auto dash = rest.find('-');
  if (dash == std::string_view::npos) return false;
  return parse_int(rest.substr(0, dash), depth) && parse_int(rest.substr(dash + 1), widen) && widen > 0;
}

inline const std::map<std::string, std::vector<int>>& vgg_configs() {
  static const std::map<std::string, std::vector<int>> kConfigs = {
      {"vgg-11", {64, 0, 128, 0, 256, 256, 0, 512, 512, 0, 512, 512, 0}},
      {"vgg-13", {64, 64, 0, 128, 128, 0, 256, 256, 0, 512, 512, 0, 512, 512, 0}},
      {"vgg-16", {64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0}},
  };
  return kConfigs;
}

inline torch::Tensor string_tensor(const std::string& s) {
  auto t = torch::empty({static_cast<std::int64_t>(s.size())}, torch::kChar);
  if (!s.empty()) std::memcpy(t.data_ptr<std::int8_t>(), s.data(), s.size());
  return t;
}

inline std::string tensor_string(const torch::Tensor& t) {
  auto c = t.contiguous();
  return std::string(reinterpret_cast<const char*>(c.data_ptr<std::int8_t>()), static_cast<std::size_t>(c.numel()));
}

inline std::vector<std::string> split_dotted(const std::string& name) {
  std::vector<std::string> parts;
  std::stringstream ss(name);
  std::string part;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  return parts;
}

}  // namespace detail

inline bool is_known_architecture(const std::string& name) {
  int d = 0, w = 0;
  return name == "toycnn" || name == "toycnn-half" || name == "resnet-18" || name == "resnet-34" ||
         detail::vgg_configs().count(name) > 0 || (detail::parse_wrn(name, d, w) && d >= 10 && (d - 4) % 6 == 0);
}

/// Constructs the architecture named by `spec.name` with default (unseeded) init.
inline Classifier make_classifier(const ArchSpec& spec) {
  if (spec.num_classes < 2) throw InvalidArgument("num_classes must be >= 2");
  const auto& n = spec.name;
  if (n == "toycnn") return std::make_shared<ToyCnnImpl>(spec, std::array<std::int64_t, 4>{16, 32, 64, 64});
  if (n == "toycnn-half") return std::make_shared<ToyCnnImpl>(spec, std::array<std::int64_t, 4>{8, 16, 32, 32});
  if (n == "resnet-18") return std::make_shared<ResNetImpl>(spec, std::array<int, 4>{2, 2, 2, 2});
  if (n == "resnet-34") return std::make_shared<ResNetImpl>(spec, std::array<int, 4>{3, 4, 6, 3});
  if (auto it = detail::vgg_configs().find(n); it != detail::vgg_configs().end()) {
    return std::make_shared<VggImpl>(spec, it->second);
  }
  int depth = 0, widen = 0;
  if (detail::parse_wrn(n, depth, widen)) return std::make_shared<WideResNetImpl>(spec, depth, widen);
  throw UnknownArchitecture("unknown architecture '" + n + "'");
}

/// Freshly initialized trainable classifier; a pure function of (spec, seed).
inline Classifier build_student(const ArchSpec& spec, std::uint64_t seed) {
  auto net = make_classifier(spec);
  init_classifier_parameters(*net, make_generator(derive_seed(seed, "classifier-init")));
  net->train();
  return net;
}

/// Writes the module in libtorch's native archive format plus architecture
/// metadata used to reject mismatched loads.
inline void save_checkpoint(const ClassifierImpl& net, const std::filesystem::path& path) {
  torch::serialize::OutputArchive archive;
  net.save(archive);
  archive.write("cmi_arch", detail::string_tensor(net.spec().name));
  archive.write("cmi_num_classes", torch::tensor({net.num_classes()}, torch::kLong));
  const auto& in = net.input_shape();
  archive.write("cmi_input_shape", torch::tensor({in.channels, in.height, in.width}, torch::kLong));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  archive.save_to(path.string());
}

namespace detail {

inline bool read_nested(torch::serialize::InputArchive& root, const std::vector<std::string>& parts,
                        torch::Tensor& out, bool is_buffer) {
  if (parts.size() == 1) return root.try_read(parts[0], out, is_buffer);
  torch::serialize::InputArchive child;
  if (!root.try_read(parts[0], child)) return false;
  return read_nested(child, std::vector<std::string>(parts.begin() + 1, parts.end()), out, is_buffer);
}

inline void load_entry(torch::serialize::InputArchive& archive, const std::string& name, torch::Tensor& dst,
                       bool is_buffer, const std::filesystem::path& path) {
  torch::Tensor src;
  if (!read_nested(archive, split_dotted(name), src, is_buffer)) {
    throw CheckpointMismatch("checkpoint " + path.string() + " has no entry '" + name + "'");
  }
  if (src.sizes() != dst.sizes()) {
    std::ostringstream os;
    os << "checkpoint " << path.string() << " entry '" << name << "' has shape " << src.sizes()
       << ", architecture expects " << dst.sizes();
    throw CheckpointMismatch(os.str());
  }
  torch::NoGradGuard ng;
  dst.copy_(src.to(dst.dtype()));
}

}  // namespace detail

/// Loads weights into `net`, verifying the stored architecture tag and every
/// tensor shape. Throws CheckpointNotFound / CheckpointMismatch.
inline void load_checkpoint(ClassifierImpl& net, const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw CheckpointNotFound("checkpoint not found: " + path.string());
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(path.string());
  } catch (const c10::Error& e) {
    throw CheckpointMismatch("cannot read checkpoint " + path.string() + ": " + e.what_without_backtrace());
  }
  torch::Tensor arch;
  if (archive.try_read("cmi_arch", arch)) {
    const auto stored = detail::tensor_string(arch);
    if (stored != net.spec().name) {
      throw CheckpointMismatch("checkpoint " + path.string() + " holds architecture '" + stored +
                               "', requested '" + net.spec().name + "'");
    }
  }
  for (auto& item : net.named_parameters(true)) detail::load_entry(archive, item.key(), item.value(), false, path);
  for (auto& item : net.named_buffers(true)) detail::load_entry(archive, item.key(), item.value(), true, path);
}

}  // namespace cmi
