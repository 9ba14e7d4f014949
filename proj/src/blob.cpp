#include "mma/blob.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "mma/errors.hpp"

namespace mma {

static_assert(std::endian::native == std::endian::little,
              "blob encoding assumes a little-endian host");

namespace {

constexpr std::string_view kMagic = "MMABLOB1";

enum class DType : std::uint8_t { kFloat32 = 0, kFloat64 = 1, kInt64 = 2 };

DType to_code(torch::ScalarType type) {
  switch (type) {
    case torch::kFloat32: return DType::kFloat32;
    case torch::kFloat64: return DType::kFloat64;
    case torch::kInt64: return DType::kInt64;
    default:
      throw FormatError(std::string("unsupported tensor dtype for blob: ") +
                        c10::toString(type));
  }
}

torch::ScalarType from_code(std::uint8_t code) {
  switch (static_cast<DType>(code)) {
    case DType::kFloat32: return torch::kFloat32;
    case DType::kFloat64: return torch::kFloat64;
    case DType::kInt64: return torch::kInt64;
  }
  throw FormatError("unknown dtype code in blob: " + std::to_string(code));
}

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    T value;
    std::memcpy(&value, take(sizeof(T)).data(), sizeof(T));
    return value;
  }

  std::string_view take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw FormatError("truncated blob");
    auto view = bytes_.substr(pos_, n);
    pos_ += n;
    return view;
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

const torch::Tensor& Blob::tensor(std::string_view name) const {
  for (const auto& [key, value] : tensors) {
    if (key == name) return value;
  }
  throw FormatError("blob '" + kind + "' has no tensor named '" +
                    std::string(name) + "'");
}

std::string encode_blob(const Blob& blob) {
  std::string out(kMagic);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(blob.kind.size()));
  out += blob.kind;
  put<std::uint32_t>(out, blob.version);
  const std::string header = blob.header.dump();
  put<std::uint64_t>(out, header.size());
  out += header;
  put<std::uint32_t>(out, static_cast<std::uint32_t>(blob.tensors.size()));
  for (const auto& [name, raw] : blob.tensors) {
    auto t = raw.detach().to(torch::kCPU).contiguous();
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint8_t>(out, static_cast<std::uint8_t>(to_code(t.scalar_type())));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.dim()));
    for (auto d : t.sizes()) put<std::int64_t>(out, d);
    out.append(static_cast<const char*>(t.data_ptr()), t.nbytes());
  }
  return out;
}

Blob decode_blob(std::string_view bytes) {
  Reader in(bytes);
  if (in.take(kMagic.size()) != kMagic) throw FormatError("not a model blob (bad magic)");
  Blob blob;
  blob.kind = std::string(in.take(in.get<std::uint32_t>()));
  blob.version = in.get<std::uint32_t>();
  try {
    blob.header = nlohmann::json::parse(in.take(in.get<std::uint64_t>()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("corrupt blob header: ") + e.what());
  }
  const auto count = in.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name(in.take(in.get<std::uint32_t>()));
    const auto dtype = from_code(in.get<std::uint8_t>());
    const auto ndim = in.get<std::uint32_t>();
    std::vector<std::int64_t> dims(ndim);
    for (auto& d : dims) d = in.get<std::int64_t>();
    auto t = torch::empty(dims, torch::TensorOptions().dtype(dtype));
    auto raw = in.take(t.nbytes());
    std::memcpy(t.data_ptr(), raw.data(), raw.size());
    blob.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (!in.done()) throw FormatError("trailing bytes after blob");
  return blob;
}

void write_blob(const std::filesystem::path& path, const Blob& blob) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open for writing: " + path.string());
  const auto bytes = encode_blob(blob);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("write failed: " + path.string());
}

Blob read_blob(const std::filesystem::path& path, std::string_view kind,
               std::uint32_t version) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  auto blob = decode_blob(ss.str());
  if (blob.kind != kind) {
    throw FormatError(path.string() + ": expected a '" + std::string(kind) +
                      "' blob, found '" + blob.kind + "'");
  }
  if (blob.version != version) {
    throw FormatError(path.string() + ": unsupported " + blob.kind + " version " +
                      std::to_string(blob.version) + " (expected " +
                      std::to_string(version) + ")");
  }
  return blob;
}

std::vector<std::pair<std::string, torch::Tensor>> module_state(
    const torch::nn::Module& module) {
  std::vector<std::pair<std::string, torch::Tensor>> state;
  for (const auto& item : module.named_parameters()) state.emplace_back(item.key(), item.value());
  for (const auto& item : module.named_buffers()) state.emplace_back(item.key(), item.value());
  return state;
}

void load_module_state(torch::nn::Module& module, const Blob& blob) {
  torch::NoGradGuard no_grad;
  auto assign = [&](const std::string& name, torch::Tensor& target) {
    const auto& source = blob.tensor(name);
    if (source.sizes() != target.sizes()) {
      throw FormatError("shape mismatch for '" + name + "' in " + blob.kind + " blob");
    }
    target.copy_(source);
  };
  for (auto& item : module.named_parameters()) assign(item.key(), item.value());
  for (auto& item : module.named_buffers()) assign(item.key(), item.value());
}

std::uint64_t fingerprint(const std::vector<torch::Tensor>& tensors) {
  std::uint64_t hash = 1469598103934665603ULL;
  for (const auto& raw : tensors) {
    auto t = raw.detach().to(torch::kCPU).contiguous();
    const auto* bytes = static_cast<const unsigned char*>(t.data_ptr());
    for (std::size_t i = 0; i < t.nbytes(); ++i) {
      hash ^= bytes[i];
      hash *= 1099511628211ULL;
    }
  }
  return hash;
}

std::uint64_t fingerprint(const torch::nn::Module& module) {
  std::vector<torch::Tensor> tensors;
  for (const auto& [_, t] : module_state(module)) tensors.push_back(t);
  return fingerprint(tensors);
}

std::string hex64(std::uint64_t value) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << value;
  return os.str();
}

}  // namespace mma
