#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace kvmix {

// Bit-exact packing of quantized integer codes into 32-bit words.
//
// Two layouts, both LSB-first within each word:
//
//   Uniform(b), b in {1,2,4}: 32/b codes per word; code i of a word occupies
//     bits [i*b, (i+1)*b).
//
//   Mixed3: blocks of 11 codes, one block per word. Codes 0..9 are 3-bit
//     fields at bit offsets 0,3,...,27 and code 10 is a 2-bit field at
//     offset 30, so a full block uses all 32 bits. This fits 11 codes per
//     word where a plain 3-bit layout fits only 10.
//
// Final partial words are zero-padded; logical_len records the code count.
// The layout above is normative: buffer dumps are bit-exact across
// implementations.

enum class PackLayout : uint8_t { kUniform = 0, kMixed3 = 1 };

inline constexpr size_t kMixed3Block = 11;

// Largest code representable at this position of the packed stream.
inline uint32_t mixed3_q_max(size_t stream_idx) {
  return stream_idx % kMixed3Block == kMixed3Block - 1 ? 3u : 7u;
}

struct PackedBuffer {
  std::vector<uint32_t> words;
  PackLayout layout = PackLayout::kUniform;
  int bits = 0;  // 1, 2 or 4 for kUniform; always 3 for kMixed3
  size_t logical_len = 0;

  uint32_t get(size_t idx) const;  // bounds-checked read
  size_t word_count() const { return words.size(); }
};

// 32/bits. Rejects widths outside {1,2,4}; 3-bit packs via Mixed3 instead.
int feat_per_word(int bits);

PackedBuffer pack_uniform(std::span<const uint32_t> codes, int bits);
PackedBuffer pack_mixed3(std::span<const uint32_t> codes);

uint32_t unpack_uniform(const PackedBuffer& buf, size_t idx);
uint32_t unpack_mixed3(const PackedBuffer& buf, size_t idx);

// Streaming writer. Pushes codes straight into the word array so callers can
// quantize-and-pack in a single pass without staging a code vector.
class PackedWriter {
 public:
  static PackedWriter uniform(int bits);
  static PackedWriter mixed3();

  void push(uint32_t code);
  size_t size() const { return len_; }
  PackedBuffer finish() &&;

 private:
  PackedWriter(PackLayout layout, int bits) : layout_(layout), bits_(bits) {}

  std::vector<uint32_t> words_;
  PackLayout layout_;
  int bits_;
  size_t len_ = 0;
};

}  // namespace kvmix
