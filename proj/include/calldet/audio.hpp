#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "calldet/errors.hpp"

namespace calldet {

// Mono PCM audio held as doubles in [-1, 1].
struct AudioClip {
  std::vector<double> samples;
  int sample_rate_hz = 0;

  double duration_sec() const {
    return sample_rate_hz > 0
               ? static_cast<double>(samples.size()) / sample_rate_hz
               : 0.0;
  }
};

// One fixed-length slice of a source file.
struct Window {
  AudioClip clip;
  double source_offset_sec = 0.0;
};

namespace detail {

inline std::uint32_t read_u32le(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint16_t read_u16le(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline void put_u32le(std::string& s, std::uint32_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
  s.push_back(static_cast<char>((v >> 16) & 0xff));
  s.push_back(static_cast<char>((v >> 24) & 0xff));
}

inline void put_u16le(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
}

}  // namespace detail

// PCM16 mono RIFF/WAVE only. Sample words are divided by 32768.
inline AudioClip load_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();

  if (n < 12 || bytes.compare(0, 4, "RIFF") != 0 || bytes.compare(8, 4, "WAVE") != 0)
    throw Error(ErrorCode::NotWav, path + " is not a RIFF/WAVE file");

  bool have_fmt = false;
  int channels = 0, bits = 0, rate = 0, audio_format = 0;
  std::size_t pos = 12;
  while (pos + 8 <= n) {
    const std::string id = bytes.substr(pos, 4);
    const std::uint32_t size = detail::read_u32le(p + pos + 4);
    pos += 8;
    if (id == "fmt ") {
      if (size < 16 || pos + 16 > n)
        throw Error(ErrorCode::Truncated, "fmt chunk truncated in " + path);
      audio_format = detail::read_u16le(p + pos);
      channels = detail::read_u16le(p + pos + 2);
      rate = static_cast<int>(detail::read_u32le(p + pos + 4));
      bits = detail::read_u16le(p + pos + 14);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt)
        throw Error(ErrorCode::NotWav, "data chunk before fmt in " + path);
      if (audio_format != 1 || channels != 1 || bits != 16)
        throw Error(ErrorCode::UnsupportedFormat,
                    path + ": only PCM16 mono is supported");
      if (pos + size > n)
        throw Error(ErrorCode::Truncated,
                    path + ": data chunk shorter than declared");
      if (size < 2)
        throw Error(ErrorCode::Truncated, path + ": empty data chunk");
      AudioClip clip;
      clip.sample_rate_hz = rate;
      const std::size_t count = size / 2;
      clip.samples.resize(count);
      for (std::size_t i = 0; i < count; ++i) {
        const std::int16_t w = static_cast<std::int16_t>(
            detail::read_u16le(p + pos + 2 * i));
        clip.samples[i] = static_cast<double>(w) / 32768.0;
      }
      return clip;
    }
    pos += size + (size & 1);  // chunks are word-aligned
  }
  throw Error(ErrorCode::Truncated, path + ": no data chunk found");
}

// Sample s is encoded as round(s * 32768) clamped to [-32768, 32767], which
// makes encode(decode(w)) == w on every PCM word.
inline void write_wav(const AudioClip& clip, const std::string& path) {
  std::string data;
  data.reserve(44 + 2 * clip.samples.size());
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(2 * clip.samples.size());
  const std::uint32_t rate = static_cast<std::uint32_t>(clip.sample_rate_hz);
  data += "RIFF";
  detail::put_u32le(data, 36 + data_bytes);
  data += "WAVE";
  data += "fmt ";
  detail::put_u32le(data, 16);
  detail::put_u16le(data, 1);   // PCM
  detail::put_u16le(data, 1);   // mono
  detail::put_u32le(data, rate);
  detail::put_u32le(data, rate * 2);  // byte rate
  detail::put_u16le(data, 2);   // block align
  detail::put_u16le(data, 16);  // bits
  data += "data";
  detail::put_u32le(data, data_bytes);
  for (double s : clip.samples) {
    long long w = std::llround(s * 32768.0);
    if (w > 32767) w = 32767;
    if (w < -32768) w = -32768;
    detail::put_u16le(data, static_cast<std::uint16_t>(static_cast<std::int16_t>(w)));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path + " for writing");
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw Error(ErrorCode::IoError, "short write to " + path);
}

// Sample-aligned slice; bounds clamped to the clip.
inline AudioClip slice_clip(const AudioClip& clip, double start_sec,
                            double end_sec) {
  const auto n = static_cast<long long>(clip.samples.size());
  long long s0 = std::llround(start_sec * clip.sample_rate_hz);
  long long s1 = std::llround(end_sec * clip.sample_rate_hz);
  s0 = std::clamp(s0, 0LL, n);
  s1 = std::clamp(s1, s0, n);
  AudioClip out;
  out.sample_rate_hz = clip.sample_rate_hz;
  out.samples.assign(clip.samples.begin() + s0, clip.samples.begin() + s1);
  return out;
}

// Consecutive non-overlapping windows at multiples of window_sec. A final
// partial window is kept only when it is at least one second long.
inline std::vector<Window> window_segments(const AudioClip& clip, double window_sec) {
  if (window_sec <= 0.0)
    throw Error(ErrorCode::BadArgument, "window_sec must be positive");
  const std::size_t win = static_cast<std::size_t>(
      std::llround(window_sec * clip.sample_rate_hz));
  const std::size_t min_tail = static_cast<std::size_t>(clip.sample_rate_hz);
  std::vector<Window> out;
  std::size_t offset = 0, index = 0;
  while (offset < clip.samples.size()) {
    const std::size_t remain = clip.samples.size() - offset;
    const std::size_t take = std::min(win, remain);
    if (take < win && take < min_tail) break;
    Window w;
    w.clip.sample_rate_hz = clip.sample_rate_hz;
    w.clip.samples.assign(clip.samples.begin() + offset,
                          clip.samples.begin() + offset + take);
    w.source_offset_sec = window_sec * static_cast<double>(index);
    out.push_back(std::move(w));
    offset += take;
    ++index;
  }
  return out;
}

}  // namespace calldet
