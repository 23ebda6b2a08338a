#include "lara/base64.hpp"

#include <bit>
#include <cstring>
#include <stdexcept>

namespace lara {

static const char kAlphabet[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

std::string base64_encode(std::span<const uint8_t> bytes) {
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  size_t i = 0;
  for (; i + 3 <= bytes.size(); i += 3) {
    uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
    out.push_back(kAlphabet[(v >> 18) & 63]);
    out.push_back(kAlphabet[(v >> 12) & 63]);
    out.push_back(kAlphabet[(v >> 6) & 63]);
    out.push_back(kAlphabet[v & 63]);
  }
  size_t rest = bytes.size() - i;
  if (rest == 1) {
    uint32_t v = bytes[i] << 16;
    out.push_back(kAlphabet[(v >> 18) & 63]);
    out.push_back(kAlphabet[(v >> 12) & 63]);
    out.push_back('=');
    out.push_back('=');
  } else if (rest == 2) {
    uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
    out.push_back(kAlphabet[(v >> 18) & 63]);
    out.push_back(kAlphabet[(v >> 12) & 63]);
    out.push_back(kAlphabet[(v >> 6) & 63]);
    out.push_back('=');
  }
  return out;
}

std::vector<uint8_t> base64_decode(const std::string& text) {
  static int8_t lut[256];
  static bool init = [] {
    for (int i = 0; i < 256; ++i) lut[i] = -1;
    for (int i = 0; i < 64; ++i) lut[static_cast<uint8_t>(kAlphabet[i])] = static_cast<int8_t>(i);
    return true;
  }();
  (void)init;

  std::vector<uint8_t> out;
  out.reserve(text.size() / 4 * 3);
  uint32_t acc = 0;
  int bits = 0;
  for (char c : text) {
    if (c == '=' || c == '\n' || c == '\r') continue;
    int8_t v = lut[static_cast<uint8_t>(c)];
    if (v < 0) throw std::invalid_argument("base64_decode: invalid character");
    acc = (acc << 6) | static_cast<uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<uint8_t>((acc >> bits) & 0xff));
    }
  }
  return out;
}

std::string encode_f32_blob(std::span<const float> values) {
  static_assert(std::endian::native == std::endian::little,
                "f32 blobs are declared little-endian");
  return base64_encode(std::span<const uint8_t>(
      reinterpret_cast<const uint8_t*>(values.data()), values.size() * sizeof(float)));
}

std::vector<float> decode_f32_blob(const std::string& text) {
  std::vector<uint8_t> bytes = base64_decode(text);
  if (bytes.size() % sizeof(float) != 0) {
    throw std::invalid_argument("decode_f32_blob: byte count not a multiple of 4");
  }
  std::vector<float> out(bytes.size() / sizeof(float));
  std::memcpy(out.data(), bytes.data(), bytes.size());
  return out;
}

}  // namespace lara
