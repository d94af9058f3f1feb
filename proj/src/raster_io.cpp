#include "ramseg/raster_io.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <regex>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

namespace ramseg {

namespace fs = std::filesystem;

namespace {

constexpr std::array<std::uint8_t, 8> kPngSignature = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1a, '\n'};
constexpr std::array<std::uint8_t, 6> kNpyMagic = {0x93, 'N', 'U', 'M', 'P', 'Y'};

bool starts_with(std::span<const std::uint8_t> bytes, std::span<const std::uint8_t> prefix) {
  return bytes.size() >= prefix.size() && std::equal(prefix.begin(), prefix.end(), bytes.begin());
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::MissingFile, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::IoError, "write failed for " + path.string());
}

// Minimal NPY (v1/v2) support: little-endian, C order, numeric dtypes.
struct NpyArray {
  std::string dtype;  // e.g. "<f4"
  std::vector<std::size_t> shape;
  std::span<const std::uint8_t> data;
};

NpyArray parse_npy(std::span<const std::uint8_t> bytes) {
  if (!starts_with(bytes, kNpyMagic) || bytes.size() < 10) fail(ErrorCode::BadImage, "not an NPY array");
  const int major = bytes[6];
  std::size_t header_len = 0, offset = 0;
  if (major == 1) {
    header_len = bytes[8] | (bytes[9] << 8);
    offset = 10;
  } else if ((major == 2 || major == 3) && bytes.size() >= 12) {
    header_len = bytes[8] | (bytes[9] << 8) | (bytes[10] << 16) | (static_cast<std::size_t>(bytes[11]) << 24);
    offset = 12;
  } else {
    fail(ErrorCode::BadImage, "unsupported NPY version");
  }
  if (offset + header_len > bytes.size()) fail(ErrorCode::BadImage, "truncated NPY header");
  const std::string header(reinterpret_cast<const char*>(bytes.data() + offset), header_len);

  NpyArray arr;
  std::smatch m;
  if (!std::regex_search(header, m, std::regex(R"('descr'\s*:\s*'([^']+)')")))
    fail(ErrorCode::BadImage, "NPY header lacks descr");
  arr.dtype = m[1];
  if (std::regex_search(header, m, std::regex(R"('fortran_order'\s*:\s*True)")))
    fail(ErrorCode::BadImage, "Fortran-ordered NPY arrays are not supported");
  if (!std::regex_search(header, m, std::regex(R"('shape'\s*:\s*\(([^)]*)\))")))
    fail(ErrorCode::BadImage, "NPY header lacks shape");
  const std::string dims = m[1];
  std::regex num(R"(\d+)");
  for (auto it = std::sregex_iterator(dims.begin(), dims.end(), num); it != std::sregex_iterator(); ++it)
    arr.shape.push_back(std::stoull(it->str()));

  std::size_t count = 1;
  for (auto d : arr.shape) count *= d;
  const std::size_t item = arr.dtype.size() >= 3 ? std::stoul(arr.dtype.substr(2)) : 0;
  if (item == 0) fail(ErrorCode::BadImage, "bad NPY dtype " + arr.dtype);
  const std::size_t start = offset + header_len;
  if (bytes.size() - start < count * item) fail(ErrorCode::BadImage, "truncated NPY payload");
  arr.data = bytes.subspan(start, count * item);
  return arr;
}

template <class Src, class Dst>
void convert_into(std::span<const std::uint8_t> raw, std::vector<Dst>& out) {
  const std::size_t n = raw.size() / sizeof(Src);
  out.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    Src v;
    std::memcpy(&v, raw.data() + i * sizeof(Src), sizeof(Src));
    out[i] = static_cast<Dst>(v);
  }
}

template <class Dst>
std::vector<Dst> npy_values(const NpyArray& arr) {
  std::vector<Dst> out;
  const auto& t = arr.dtype;
  if (t == "<f4") convert_into<float>(arr.data, out);
  else if (t == "<f8") convert_into<double>(arr.data, out);
  else if (t == "|u1" || t == "<u1") convert_into<std::uint8_t>(arr.data, out);
  else if (t == "|i1" || t == "<i1") convert_into<std::int8_t>(arr.data, out);
  else if (t == "<u2") convert_into<std::uint16_t>(arr.data, out);
  else if (t == "<i2") convert_into<std::int16_t>(arr.data, out);
  else if (t == "<i4") convert_into<std::int32_t>(arr.data, out);
  else if (t == "<u4") convert_into<std::uint32_t>(arr.data, out);
  else if (t == "<i8") convert_into<std::int64_t>(arr.data, out);
  else fail(ErrorCode::BadImage, "unsupported NPY dtype " + t);
  return out;
}

std::vector<std::uint8_t> make_npy(const std::string& dtype, const std::vector<std::size_t>& shape,
                                   const void* data, std::size_t nbytes) {
  std::string dims = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) dims += (i ? ", " : "") + std::to_string(shape[i]);
  dims += shape.size() == 1 ? ",)" : ")";
  std::string header = "{'descr': '" + dtype + "', 'fortran_order': False, 'shape': " + dims + ", }";
  const std::size_t total = 10 + header.size() + 1;
  header.append((64 - total % 64) % 64, ' ');
  header.push_back('\n');

  std::vector<std::uint8_t> out(kNpyMagic.begin(), kNpyMagic.end());
  out.push_back(1);
  out.push_back(0);
  out.push_back(static_cast<std::uint8_t>(header.size() & 0xff));
  out.push_back(static_cast<std::uint8_t>(header.size() >> 8));
  out.insert(out.end(), header.begin(), header.end());
  const auto* p = static_cast<const std::uint8_t*>(data);
  out.insert(out.end(), p, p + nbytes);
  return out;
}

template <class T>
Grid<T> decode_png(std::span<const std::uint8_t> bytes) {
  cv::Mat buf(1, static_cast<int>(bytes.size()), CV_8U, const_cast<std::uint8_t*>(bytes.data()));
  cv::Mat img = cv::imdecode(buf, cv::IMREAD_ANYDEPTH | cv::IMREAD_GRAYSCALE);
  if (img.empty()) fail(ErrorCode::BadImage, "undecodable PNG");
  cv::Mat converted;
  img.convertTo(converted, cv::DataType<T>::type);
  Grid<T> out(converted.rows, converted.cols);
  for (int y = 0; y < converted.rows; ++y)
    std::memcpy(&out.at(y, 0), converted.ptr<T>(y), sizeof(T) * converted.cols);
  return out;
}

template <class T>
Grid<T> grid_from_npy(const NpyArray& arr) {
  if (arr.shape.size() != 2) fail(ErrorCode::BadImage, "expected a 2D array, got " + std::to_string(arr.shape.size()) + "D");
  return Grid<T>(static_cast<int>(arr.shape[0]), static_cast<int>(arr.shape[1]), npy_values<T>(arr));
}

template <class T>
Volume<T> volume_from_npy(const NpyArray& arr) {
  if (arr.shape.size() != 3) fail(ErrorCode::BadImage, "expected a 3D array");
  return {static_cast<int>(arr.shape[0]), static_cast<int>(arr.shape[1]), static_cast<int>(arr.shape[2]),
          npy_values<T>(arr)};
}

std::vector<std::uint8_t> encode_png(const cv::Mat& img) {
  std::vector<std::uint8_t> out;
  if (!cv::imencode(".png", img, out)) fail(ErrorCode::IoError, "PNG encoding failed");
  return out;
}

}  // namespace

Grid<float> decode_image(std::span<const std::uint8_t> bytes) {
  if (starts_with(bytes, kPngSignature)) return decode_png<float>(bytes);
  if (starts_with(bytes, kNpyMagic)) return grid_from_npy<float>(parse_npy(bytes));
  fail(ErrorCode::BadImage, "unrecognized raster format (expected PNG or NPY)");
}

Grid<std::int32_t> decode_labels(std::span<const std::uint8_t> bytes) {
  if (starts_with(bytes, kPngSignature)) return decode_png<std::int32_t>(bytes);
  if (starts_with(bytes, kNpyMagic)) {
    auto arr = parse_npy(bytes);
    if (arr.dtype[1] == 'f') fail(ErrorCode::BadImage, "label arrays must have an integer dtype");
    return grid_from_npy<std::int32_t>(arr);
  }
  fail(ErrorCode::BadImage, "unrecognized raster format (expected PNG or NPY)");
}

std::vector<std::uint8_t> encode_image(const Grid<float>& image) {
  bool integral = true;
  for (float v : image.values())
    if (!(v >= 0.0f && v <= 65535.0f && std::floor(v) == v)) {
      integral = false;
      break;
    }
  if (integral && !image.empty()) {
    cv::Mat img(image.height(), image.width(), CV_16U);
    for (int y = 0; y < image.height(); ++y)
      for (int x = 0; x < image.width(); ++x) img.at<std::uint16_t>(y, x) = static_cast<std::uint16_t>(image.at(y, x));
    return encode_png(img);
  }
  return make_npy("<f4", {static_cast<std::size_t>(image.height()), static_cast<std::size_t>(image.width())},
                  image.values().data(), image.size() * sizeof(float));
}

std::vector<std::uint8_t> encode_labels_png(const Grid<std::int32_t>& labels) {
  cv::Mat img(labels.height(), labels.width(), CV_16U);
  for (int y = 0; y < labels.height(); ++y)
    for (int x = 0; x < labels.width(); ++x) {
      const auto v = labels.at(y, x);
      if (v < 0 || v > 65535) fail(ErrorCode::InvalidArgument, "label out of 16-bit PNG range");
      img.at<std::uint16_t>(y, x) = static_cast<std::uint16_t>(v);
    }
  return encode_png(img);
}

std::vector<std::uint8_t> encode_display_png(const Grid<float>& image) {
  const auto scaled = normalize_intensity(image, IntensityMode::MinMax);
  cv::Mat img(image.height(), image.width(), CV_8U);
  for (int y = 0; y < image.height(); ++y)
    for (int x = 0; x < image.width(); ++x)
      img.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(std::lround(scaled.at(y, x) * 255.0f));
  return encode_png(img);
}

Grid<float> read_image(const fs::path& path) { return decode_image(read_bytes(path)); }

void write_image(const fs::path& path, const Grid<float>& image) {
  if (path.extension() == ".npy") {
    write_bytes(path, make_npy("<f4", {static_cast<std::size_t>(image.height()), static_cast<std::size_t>(image.width())},
                               image.values().data(), image.size() * sizeof(float)));
    return;
  }
  auto bytes = encode_image(image);
  if (!starts_with(bytes, kPngSignature))
    fail(ErrorCode::InvalidArgument, "non-integer image cannot be stored losslessly as PNG: " + path.string());
  write_bytes(path, bytes);
}

Grid<std::int32_t> read_labels(const fs::path& path) { return decode_labels(read_bytes(path)); }

void write_labels(const fs::path& path, const Grid<std::int32_t>& labels) {
  if (path.extension() == ".npy") {
    write_bytes(path, make_npy("<i4", {static_cast<std::size_t>(labels.height()), static_cast<std::size_t>(labels.width())},
                               labels.values().data(), labels.size() * sizeof(std::int32_t)));
    return;
  }
  write_bytes(path, encode_labels_png(labels));
}

Volume<float> read_volume(const fs::path& path) {
  auto bytes = read_bytes(path);
  return volume_from_npy<float>(parse_npy(bytes));
}

Volume<std::int32_t> read_label_volume(const fs::path& path) {
  auto bytes = read_bytes(path);
  return volume_from_npy<std::int32_t>(parse_npy(bytes));
}

void write_volume(const fs::path& path, const Volume<float>& v) {
  write_bytes(path, make_npy("<f4", {std::size_t(v.depth), std::size_t(v.height), std::size_t(v.width)},
                             v.voxels.data(), v.voxels.size() * sizeof(float)));
}

void write_label_volume(const fs::path& path, const Volume<std::int32_t>& v) {
  write_bytes(path, make_npy("<i4", {std::size_t(v.depth), std::size_t(v.height), std::size_t(v.width)},
                             v.voxels.data(), v.voxels.size() * sizeof(std::int32_t)));
}

namespace {
constexpr char kB64[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < bytes.size(); i += 3) {
    const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out += {kB64[v >> 18], kB64[(v >> 12) & 63], kB64[(v >> 6) & 63], kB64[v & 63]};
  }
  if (const auto rest = bytes.size() - i; rest > 0) {
    const std::uint32_t v = (bytes[i] << 16) | (rest == 2 ? bytes[i + 1] << 8 : 0);
    out += {kB64[v >> 18], kB64[(v >> 12) & 63], rest == 2 ? kB64[(v >> 6) & 63] : '=', '='};
  }
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+' || c == '-') return 62;
    if (c == '/' || c == '_') return 63;
    return -1;
  };
  std::string clean;
  clean.reserve(text.size());
  for (char c : text)
    if (c != '\n' && c != '\r' && c != ' ') clean.push_back(c);
  while (!clean.empty() && clean.back() == '=') clean.pop_back();
  if (clean.size() % 4 == 1) fail(ErrorCode::BadImage, "malformed base64 payload");

  std::vector<std::uint8_t> out;
  out.reserve(clean.size() * 3 / 4);
  std::uint32_t acc = 0;
  int bits = 0;
  for (char c : clean) {
    const int v = value(c);
    if (v < 0) fail(ErrorCode::BadImage, "malformed base64 payload");
    acc = (acc << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>((acc >> bits) & 0xff));
    }
  }
  return out;
}

}  // namespace ramseg
