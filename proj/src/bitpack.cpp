#include "kvmix/bitpack.hpp"

#include <stdexcept>
#include <string>

namespace kvmix {

int feat_per_word(int bits) {
  if (bits != 1 && bits != 2 && bits != 4) {
    throw std::invalid_argument("feat_per_word: bits must be 1, 2 or 4, got " +
                                std::to_string(bits));
  }
  return 32 / bits;
}

PackedWriter PackedWriter::uniform(int bits) {
  feat_per_word(bits);  // validates
  return PackedWriter(PackLayout::kUniform, bits);
}

PackedWriter PackedWriter::mixed3() { return PackedWriter(PackLayout::kMixed3, 3); }

void PackedWriter::push(uint32_t code) {
  if (layout_ == PackLayout::kUniform) {
    const uint32_t q_max = (1u << bits_) - 1u;
    if (code > q_max) {
      throw std::invalid_argument("pack_uniform: code " + std::to_string(code) + " at index " +
                                  std::to_string(len_) + " exceeds " + std::to_string(q_max) +
                                  " for " + std::to_string(bits_) + "-bit fields");
    }
    const size_t slot = len_ % static_cast<size_t>(32 / bits_);
    if (slot == 0) words_.push_back(0);
    words_.back() |= code << (slot * static_cast<size_t>(bits_));
  } else {
    const size_t pos = len_ % kMixed3Block;
    const uint32_t q_max = pos == 10 ? 3u : 7u;
    if (code > q_max) {
      throw std::invalid_argument("pack_mixed3: code " + std::to_string(code) + " in block " +
                                  std::to_string(len_ / kMixed3Block) + " at intra-block index " +
                                  std::to_string(pos) + " exceeds " + std::to_string(q_max));
    }
    if (pos == 0) words_.push_back(0);
    words_.back() |= code << (pos == 10 ? 30u : 3u * pos);
  }
  ++len_;
}

PackedBuffer PackedWriter::finish() && {
  PackedBuffer buf;
  buf.words = std::move(words_);
  buf.layout = layout_;
  buf.bits = bits_;
  buf.logical_len = len_;
  return buf;
}

PackedBuffer pack_uniform(std::span<const uint32_t> codes, int bits) {
  PackedWriter w = PackedWriter::uniform(bits);
  for (uint32_t c : codes) w.push(c);
  return std::move(w).finish();
}

PackedBuffer pack_mixed3(std::span<const uint32_t> codes) {
  PackedWriter w = PackedWriter::mixed3();
  for (uint32_t c : codes) w.push(c);
  return std::move(w).finish();
}

uint32_t PackedBuffer::get(size_t idx) const {
  if (idx >= logical_len) {
    throw std::out_of_range("PackedBuffer::get: index " + std::to_string(idx) +
                            " out of bounds (logical_len " + std::to_string(logical_len) + ")");
  }
  if (layout == PackLayout::kUniform) {
    const size_t fpw = static_cast<size_t>(32 / bits);
    const uint32_t mask = (1u << bits) - 1u;
    return (words[idx / fpw] >> ((idx % fpw) * static_cast<size_t>(bits))) & mask;
  }
  const size_t pos = idx % kMixed3Block;
  const uint32_t word = words[idx / kMixed3Block];
  return pos == 10 ? (word >> 30) & 3u : (word >> (3u * pos)) & 7u;
}

uint32_t unpack_uniform(const PackedBuffer& buf, size_t idx) {
  if (buf.layout != PackLayout::kUniform) {
    throw std::invalid_argument("unpack_uniform: buffer does not use a uniform layout");
  }
  return buf.get(idx);
}

uint32_t unpack_mixed3(const PackedBuffer& buf, size_t idx) {
  if (buf.layout != PackLayout::kMixed3) {
    throw std::invalid_argument("unpack_mixed3: buffer does not use the mixed 3-bit layout");
  }
  return buf.get(idx);
}

}  // namespace kvmix
