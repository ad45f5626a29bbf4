#include "dsba/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "dsba/errors.hpp"

namespace dsba {

namespace fs = std::filesystem;

void write_manifest(const Manifest& manifest, const fs::path& file) {
  std::ofstream out(file);
  if (!out) throw Error("cannot write " + file.string());
  for (const auto& [k, v] : manifest) out << k << '=' << v << '\n';
}

Manifest read_manifest(const fs::path& file) {
  std::ifstream in(file);
  if (!in) throw LoadError("missing manifest " + file.string());
  Manifest m;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw LoadError("malformed line in " + file.string() + ": " + line);
    m[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return m;
}

namespace {

std::string join(const std::vector<std::int64_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<std::int64_t> split(const std::string& s) {
  std::vector<std::int64_t> v;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) v.push_back(std::stoll(item));
  return v;
}

const std::string& field(const Manifest& m, const std::string& key, const fs::path& file) {
  const auto it = m.find(key);
  if (it == m.end()) throw LoadError(file.string() + " lacks '" + key + "'");
  return it->second;
}

std::string precise(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <typename Net>
void save_weights(const Net& net, const fs::path& file) {
  torch::serialize::OutputArchive archive;
  for (const auto& item : net->named_parameters()) archive.write(item.key(), item.value().detach());
  for (const auto& item : net->named_buffers()) archive.write(item.key(), item.value(), /*is_buffer=*/true);
  archive.save_to(file.string());
}

template <typename Net>
void load_weights(Net& net, const fs::path& file) {
  if (!fs::exists(file)) throw LoadError("missing weights " + file.string());
  torch::serialize::InputArchive archive;
  try {
    archive.load_from(file.string());
    torch::NoGradGuard no_grad;
    for (auto& item : net->named_parameters()) {
      torch::Tensor t;
      archive.read(item.key(), t);
      item.value().copy_(t);
    }
    for (auto& item : net->named_buffers()) {
      torch::Tensor t;
      archive.read(item.key(), t, /*is_buffer=*/true);
      item.value().copy_(t);
    }
  } catch (const c10::Error& e) {
    throw LoadError("unreadable weights " + file.string() + ": " + e.what_without_backtrace());
  }
}

void verify(const std::string& actual, const Manifest& m, const fs::path& file) {
  if (actual != field(m, "checksum", file)) throw LoadError("checksum mismatch for " + file.string());
}

}  // namespace

void save_encoder(const EncoderParams& encoder, const fs::path& dir, const std::string& name) {
  fs::create_directories(dir);
  save_weights(encoder.net(), dir / (name + ".pt"));
  const auto& a = encoder.arch();
  write_manifest({{"kind", "encoder"},
                  {"role", to_string(encoder.role())},
                  {"seed", std::to_string(encoder.seed())},
                  {"in_channels", std::to_string(a.in_channels)},
                  {"image_size", std::to_string(a.image_size)},
                  {"widths", join(a.widths)},
                  {"feature_dim", std::to_string(a.feature_dim)},
                  {"checksum", encoder.checksum()}},
                 dir / (name + ".manifest"));
}

EncoderParams load_encoder(const fs::path& dir, const std::string& name) {
  const auto mfile = dir / (name + ".manifest");
  const auto m = read_manifest(mfile);
  if (field(m, "kind", mfile) != "encoder") throw LoadError(mfile.string() + " does not describe an encoder");
  EncoderArch a;
  try {
    a.in_channels = std::stoll(field(m, "in_channels", mfile));
    a.image_size = std::stoll(field(m, "image_size", mfile));
    a.widths = split(field(m, "widths", mfile));
    a.feature_dim = std::stoll(field(m, "feature_dim", mfile));
  } catch (const std::logic_error&) {
    throw LoadError("malformed architecture in " + mfile.string());
  }
  const auto role = field(m, "role", mfile) == "backdoor" ? EncoderRole::Backdoor : EncoderRole::Clean;
  EncoderParams enc(a, role, std::stoull(field(m, "seed", mfile)));
  load_weights(enc.net(), dir / (name + ".pt"));
  verify(enc.checksum(), m, mfile);
  return enc;
}

void save_generator(const GeneratorParams& generator, const fs::path& dir, const std::string& name) {
  fs::create_directories(dir);
  save_weights(generator.net(), dir / (name + ".pt"));
  const auto& a = generator.arch();
  write_manifest({{"kind", "generator"},
                  {"seed", std::to_string(generator.seed())},
                  {"in_channels", std::to_string(a.in_channels)},
                  {"base_width", std::to_string(a.base_width)},
                  {"epsilon", precise(a.epsilon)},
                  {"checksum", generator.checksum()}},
                 dir / (name + ".manifest"));
}

GeneratorParams load_generator(const fs::path& dir, const std::string& name) {
  const auto mfile = dir / (name + ".manifest");
  const auto m = read_manifest(mfile);
  if (field(m, "kind", mfile) != "generator") throw LoadError(mfile.string() + " does not describe a generator");
  GeneratorArch a;
  try {
    a.in_channels = std::stoll(field(m, "in_channels", mfile));
    a.base_width = std::stoll(field(m, "base_width", mfile));
    a.epsilon = std::stod(field(m, "epsilon", mfile));
  } catch (const std::logic_error&) {
    throw LoadError("malformed architecture in " + mfile.string());
  }
  GeneratorParams gen(a, std::stoull(field(m, "seed", mfile)));
  load_weights(gen.net(), dir / (name + ".pt"));
  verify(gen.checksum(), m, mfile);
  return gen;
}

}  // namespace dsba
