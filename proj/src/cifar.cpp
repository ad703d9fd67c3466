#include <curl/curl.h>
#include <openssl/evp.h>
#include <zlib.h>

#include <algorithm>
#include <array>
#include <cstring>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <sstream>

#include "msn/data.hpp"

namespace fs = std::filesystem;

namespace msn::data {

LabeledDataset decode_cifar10(std::span<const std::uint8_t> bytes, Split split) {
  if (bytes.size() % kCifarRecordBytes != 0) {
    throw FormatError("CIFAR-10: " + std::to_string(bytes.size()) + " bytes is not a whole number of " +
                      std::to_string(kCifarRecordBytes) + "-byte records (truncated file?)");
  }
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  if (n == 0) throw FormatError("CIFAR-10: empty file");
  LabeledDataset out;
  out.images = Tensor(Shape{n, 32, 32, 3});
  out.labels.resize(n);
  out.classes = 10;
  out.split = split;
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint8_t* rec = bytes.data() + i * kCifarRecordBytes;
    if (rec[0] > 9) {
      throw FormatError("CIFAR-10: record " + std::to_string(i) + " has label byte " + std::to_string(rec[0]));
    }
    out.labels[i] = rec[0];
    const std::uint8_t* planes = rec + 1;
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t p = 0; p < 1024; ++p) {
        out.images[(i * 1024 + p) * 3 + c] = static_cast<float>(planes[c * 1024 + p]) / 255.0f;
      }
    }
  }
  return out;
}

std::vector<std::uint8_t> encode_cifar10(const LabeledDataset& dataset) {
  if (dataset.height() != 32 || dataset.width() != 32 || dataset.channels() != 3) {
    throw ShapeError("encode_cifar10: images must be 32x32x3, got " + dataset.images.shape().str());
  }
  std::vector<std::uint8_t> out(dataset.size() * kCifarRecordBytes);
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    std::uint8_t* rec = out.data() + i * kCifarRecordBytes;
    rec[0] = static_cast<std::uint8_t>(dataset.labels[i]);
    for (std::size_t c = 0; c < 3; ++c) {
      for (std::size_t p = 0; p < 1024; ++p) {
        const float v = std::clamp(dataset.images[(i * 1024 + p) * 3 + c], 0.0f, 1.0f);
        rec[1 + c * 1024 + p] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
    }
  }
  return out;
}

LabeledDataset load_cifar10_file(const fs::path& file, Split split) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw FormatError("cannot open " + file.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_cifar10(bytes, split);
  } catch (const FormatError& e) {
    throw FormatError(file.string() + ": " + e.what());
  }
}

CifarFiles CifarFiles::in(const fs::path& root) {
  const fs::path dir = root / kCifarDirName;
  CifarFiles f;
  for (int i = 1; i <= 5; ++i) f.train.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  f.test = dir / "test_batch.bin";
  return f;
}

CifarSplits load_cifar10(const CifarFiles& files) {
  CifarSplits out;
  std::vector<LabeledDataset> parts;
  std::size_t total = 0;
  for (const auto& f : files.train) {
    parts.push_back(load_cifar10_file(f, Split::train));
    total += parts.back().size();
  }
  if (parts.empty()) throw FormatError("load_cifar10: no training files");
  out.train.images = Tensor(Shape{total, 32, 32, 3});
  out.train.classes = 10;
  out.train.split = Split::train;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    std::copy(p.images.values().begin(), p.images.values().end(), out.train.images.data() + offset);
    offset += p.images.size();
    out.train.labels.insert(out.train.labels.end(), p.labels.begin(), p.labels.end());
  }
  out.test = load_cifar10_file(files.test, Split::test);
  return out;
}

// ---- fetch -----------------------------------------------------------------

std::string file_digest(const fs::path& file, const std::string& algorithm) {
  const EVP_MD* md = algorithm == "sha256" ? EVP_sha256() : algorithm == "md5" ? EVP_md5() : nullptr;
  if (md == nullptr) throw FetchError(FetchError::Kind::usage, "unsupported digest algorithm '" + algorithm + "'");
  std::ifstream in(file, std::ios::binary);
  if (!in) throw FetchError(FetchError::Kind::format, "cannot open " + file.string());

  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), md, nullptr);
  std::vector<char> buf(1 << 20);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> out{};
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), out.data(), &len);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int{out[i]};
  return hex.str();
}

namespace {

const char* kMarker = ".verified";

std::pair<std::string, std::string> split_digest(const std::string& spec) {
  const auto colon = spec.find(':');
  if (colon == std::string::npos) {
    throw FetchError(FetchError::Kind::usage, "digest must look like 'sha256:<hex>' or 'md5:<hex>'");
  }
  return {spec.substr(0, colon), spec.substr(colon + 1)};
}

std::vector<std::string> expected_files() {
  std::vector<std::string> names;
  for (int i = 1; i <= 5; ++i) names.push_back("data_batch_" + std::to_string(i) + ".bin");
  names.push_back("test_batch.bin");
  return names;
}

// The marker lists sha256 digests of the extracted files; a directory is
// verified when every listed file still hashes to its recorded value.
bool extraction_verified(const fs::path& dir, const FetchOptions& options) {
  std::ifstream in(dir / kMarker);
  if (!in) return false;
  std::map<std::string, std::string> recorded;
  std::string name, digest;
  while (in >> name >> digest) recorded[name] = digest;
  if (recorded["archive"] != options.digest) return false;
  for (const auto& f : expected_files()) {
    const fs::path p = dir / f;
    if (!fs::exists(p) || fs::file_size(p) != options.records_per_file * kCifarRecordBytes) return false;
    if (recorded[f] != file_digest(p, "sha256")) return false;
  }
  return true;
}

std::size_t write_to_file(char* ptr, std::size_t size, std::size_t nmemb, void* user) {
  return std::fwrite(ptr, size, nmemb, static_cast<std::FILE*>(user));
}

void download(const std::string& url, const fs::path& target, int attempts) {
  static const bool initialized = [] { return curl_global_init(CURL_GLOBAL_DEFAULT) == CURLE_OK; }();
  if (!initialized) throw FetchError(FetchError::Kind::network, "libcurl initialization failed");
  const fs::path part = fs::path(target).concat(".part");
  std::string last_error;
  for (int attempt = 0; attempt < std::max(attempts, 1); ++attempt) {
    std::FILE* out = std::fopen(part.c_str(), "wb");
    if (out == nullptr) throw FetchError(FetchError::Kind::format, "cannot write " + part.string());
    std::unique_ptr<CURL, decltype(&curl_easy_cleanup)> curl(curl_easy_init(), &curl_easy_cleanup);
    curl_easy_setopt(curl.get(), CURLOPT_URL, url.c_str());
    curl_easy_setopt(curl.get(), CURLOPT_FOLLOWLOCATION, 1L);
    curl_easy_setopt(curl.get(), CURLOPT_FAILONERROR, 1L);
    curl_easy_setopt(curl.get(), CURLOPT_CONNECTTIMEOUT, 30L);
    curl_easy_setopt(curl.get(), CURLOPT_WRITEFUNCTION, &write_to_file);
    curl_easy_setopt(curl.get(), CURLOPT_WRITEDATA, out);
    const CURLcode rc = curl_easy_perform(curl.get());
    std::fclose(out);
    if (rc == CURLE_OK) {
      fs::rename(part, target);
      return;
    }
    last_error = curl_easy_strerror(rc);
    fs::remove(part);
  }
  throw FetchError(FetchError::Kind::network, "download of " + url + " failed: " + last_error);
}

std::size_t parse_octal(const char* field, std::size_t len) {
  std::size_t v = 0;
  for (std::size_t i = 0; i < len && field[i] != '\0' && field[i] != ' '; ++i) {
    if (field[i] < '0' || field[i] > '7') throw FetchError(FetchError::Kind::format, "corrupt tar header");
    v = v * 8 + static_cast<std::size_t>(field[i] - '0');
  }
  return v;
}

// Extracts the regular files of a gzip-compressed ustar archive into `dir`,
// flattening paths to their file names.
std::vector<std::string> extract_tar_gz(const fs::path& archive, const fs::path& dir) {
  gzFile gz = gzopen(archive.c_str(), "rb");
  if (gz == nullptr) throw FetchError(FetchError::Kind::format, "cannot open " + archive.string());
  std::unique_ptr<gzFile_s, decltype(&gzclose)> guard(gz, &gzclose);
  auto read_exact = [&](char* buf, std::size_t n) {
    std::size_t got = 0;
    while (got < n) {
      const int r = gzread(gz, buf + got, static_cast<unsigned>(std::min<std::size_t>(n - got, 1 << 20)));
      if (r <= 0) return false;
      got += static_cast<std::size_t>(r);
    }
    return true;
  };

  fs::create_directories(dir);
  std::vector<std::string> written;
  std::array<char, 512> header{};
  std::vector<char> buf;
  while (read_exact(header.data(), header.size())) {
    if (header[0] == '\0') break;
    std::string name(header.data(), strnlen(header.data(), 100));
    const std::size_t size = parse_octal(header.data() + 124, 12);
    const char type = header[156];
    const std::size_t padded = (size + 511) / 512 * 512;
    buf.resize(padded);
    if (!read_exact(buf.data(), padded)) throw FetchError(FetchError::Kind::format, "truncated archive");
    if (type != '0' && type != '\0') continue;
    const std::string base = fs::path(name).filename().string();
    if (base.empty() || base == "." || base == "..") continue;
    std::ofstream out(dir / base, std::ios::binary);
    out.write(buf.data(), static_cast<std::streamsize>(size));
    written.push_back(base);
  }
  return written;
}

}  // namespace

FetchResult fetch_dataset(const std::string& name, const fs::path& dest, const FetchOptions& options) {
  if (name != "cifar10") throw FetchError(FetchError::Kind::usage, "unknown dataset '" + name + "'");
  const auto [algorithm, expected] = split_digest(options.digest);
  const fs::path dir = dest / kCifarDirName;
  FetchResult result;
  result.files = CifarFiles::in(dest);
  if (extraction_verified(dir, options)) {
    result.already_verified = true;
    return result;
  }

  fs::create_directories(dest);
  const fs::path archive = dest / options.archive_name;
  if (!fs::exists(archive)) {
    download(options.url, archive, options.attempts);
    result.downloaded = true;
  }
  const std::string actual = file_digest(archive, algorithm);
  if (actual != expected) {
    throw FetchError(FetchError::Kind::digest_mismatch, archive.string() + ": " + algorithm + " digest mismatch, expected " +
                                                            expected + ", got " + actual);
  }

  extract_tar_gz(archive, dir);
  std::ostringstream marker;
  marker << "archive " << options.digest << '\n';
  for (const auto& f : expected_files()) {
    const fs::path p = dir / f;
    if (!fs::exists(p)) throw FetchError(FetchError::Kind::format, "archive is missing " + f);
    const auto size = fs::file_size(p);
    if (size != options.records_per_file * kCifarRecordBytes) {
      throw FetchError(FetchError::Kind::format, f + " has " + std::to_string(size) + " bytes, expected " +
                                                     std::to_string(options.records_per_file * kCifarRecordBytes));
    }
    marker << f << ' ' << file_digest(p, "sha256") << '\n';
  }
  std::ofstream(dir / kMarker) << marker.str();
  return result;
}

}  // namespace msn::data
