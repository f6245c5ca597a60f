#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "nbeam/dsp.hpp"

namespace nbeam::wav {

enum class SampleFormat { kPcm16, kFloat32 };

namespace detail {

inline void put_u16(std::vector<char>& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
}

inline void put_u32(std::vector<char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline std::uint16_t get_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace detail

// Serializes to an in-memory RIFF/WAVE image (little-endian, interleaved).
inline std::vector<char> encode(const Waveform& wave, SampleFormat format = SampleFormat::kFloat32) {
  using namespace detail;
  const auto channels = static_cast<std::uint16_t>(wave.channels());
  const std::uint16_t bits = format == SampleFormat::kPcm16 ? 16 : 32;
  const std::uint16_t block = static_cast<std::uint16_t>(channels * bits / 8);
  const auto data_bytes = static_cast<std::uint32_t>(wave.samples() * block);

  std::vector<char> out;
  out.reserve(44 + data_bytes);
  out.insert(out.end(), {'R', 'I', 'F', 'F'});
  put_u32(out, 36 + data_bytes);
  out.insert(out.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
  put_u32(out, 16);
  put_u16(out, format == SampleFormat::kPcm16 ? 1 : 3);
  put_u16(out, channels);
  put_u32(out, static_cast<std::uint32_t>(wave.sample_rate()));
  put_u32(out, static_cast<std::uint32_t>(wave.sample_rate()) * block);
  put_u16(out, block);
  put_u16(out, bits);
  out.insert(out.end(), {'d', 'a', 't', 'a'});
  put_u32(out, data_bytes);

  for (std::size_t n = 0; n < wave.samples(); ++n) {
    for (std::size_t c = 0; c < wave.channels(); ++c) {
      const double v = wave.at(c, n);
      if (format == SampleFormat::kPcm16) {
        const double scaled = std::clamp(std::round(v * 32768.0), -32768.0, 32767.0);
        put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(scaled)));
      } else {
        const float f = static_cast<float>(v);
        std::uint32_t bitsv = 0;
        std::memcpy(&bitsv, &f, sizeof f);
        put_u32(out, bitsv);
      }
    }
  }
  return out;
}

inline Waveform decode(const std::vector<char>& bytes) {
  using namespace detail;
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t size = bytes.size();
  if (size < 12 || std::memcmp(p, "RIFF", 4) != 0 || std::memcmp(p + 8, "WAVE", 4) != 0) {
    throw std::runtime_error("wav: not a RIFF/WAVE file");
  }
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  const unsigned char* data = nullptr;
  std::uint32_t data_len = 0;
  std::size_t pos = 12;
  while (pos + 8 <= size) {
    const std::uint32_t len = get_u32(p + pos + 4);
    const unsigned char* body = p + pos + 8;
    if (pos + 8 + len > size) throw std::runtime_error("wav: truncated chunk");
    if (std::memcmp(p + pos, "fmt ", 4) == 0) {
      if (len < 16) throw std::runtime_error("wav: short fmt chunk");
      format = get_u16(body);
      channels = get_u16(body + 2);
      rate = get_u32(body + 4);
      bits = get_u16(body + 14);
      if (format == 0xFFFE && len >= 26) format = get_u16(body + 24);  // WAVE_FORMAT_EXTENSIBLE
    } else if (std::memcmp(p + pos, "data", 4) == 0) {
      data = body;
      data_len = len;
    }
    pos += 8 + len + (len & 1u);
  }
  if (channels == 0 || data == nullptr) throw std::runtime_error("wav: missing fmt or data chunk");
  const bool pcm16 = format == 1 && bits == 16;
  const bool float32 = format == 3 && bits == 32;
  if (!pcm16 && !float32) throw std::runtime_error("wav: only PCM16 and float32 are supported");

  const std::size_t block = static_cast<std::size_t>(channels) * bits / 8;
  const std::size_t frames = data_len / block;
  Waveform wave(channels, frames, static_cast<int>(rate));
  for (std::size_t n = 0; n < frames; ++n) {
    for (std::size_t c = 0; c < channels; ++c) {
      const unsigned char* s = data + n * block + c * (bits / 8);
      if (pcm16) {
        wave.at(c, n) = static_cast<std::int16_t>(get_u16(s)) / 32768.0;
      } else {
        const std::uint32_t u = get_u32(s);
        float f = 0.0f;
        std::memcpy(&f, &u, sizeof f);
        wave.at(c, n) = f;
      }
    }
  }
  return wave;
}

inline void write(const std::string& path, const Waveform& wave, SampleFormat format = SampleFormat::kFloat32) {
  const auto bytes = encode(wave, format);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("wav: cannot open for writing: " + path);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("wav: write failed: " + path);
}

inline Waveform read(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("wav: cannot open: " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode(bytes);
}

}  // namespace nbeam::wav
