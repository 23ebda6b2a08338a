#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace lara {

std::string base64_encode(std::span<const uint8_t> bytes);
std::vector<uint8_t> base64_decode(const std::string& text);

// Little-endian float32 blob helpers for JSONL observation payloads.
std::string encode_f32_blob(std::span<const float> values);
std::vector<float> decode_f32_blob(const std::string& text);

}  // namespace lara
