#pragma once

// On-disk store for compressed teacher features and logits. Layout:
// header, offset index, then one variable-length record per sample, all
// little-endian. Static width masks are config-derived and live once in the
// header; dynamic (magnitude) masks ride along per kept token vector.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "hskd/common.hpp"
#include "hskd/compress.hpp"
#include "hskd/serialize.hpp"

namespace hskd {

struct FeatureRecord {
  uint64_t sample_id = 0;
  uint32_t seq_len = 0;
  CompressedHsk hsk;
  std::vector<float> teacher_logits;

  bool operator==(const FeatureRecord& other) const = default;
};

struct StoreHeader {
  static constexpr char kMagic[5] = "HSKF";
  static constexpr uint16_t kVersion = 1;

  uint16_t version = kVersion;
  bool rle_masks = false;
  uint64_t teacher_digest = 0;
  uint32_t num_classes = 0;
  uint32_t teacher_dim = 0;
  uint32_t n_width = 0;
  uint64_t record_count = 0;
  uint64_t index_offset = 0;
  uint64_t data_offset = 0;
  uint64_t total_size = 0;
  CompressionConfig config;
  WidthMask static_mask;  // populated for Rand/Uniform stores

  bool has_static_mask() const { return config.width_strategy != WidthStrategy::Mag; }

  nlohmann::json to_json() const {
    return {{"version", version},
            {"rle_masks", rle_masks},
            {"teacher_digest", teacher_digest},
            {"num_classes", num_classes},
            {"teacher_dim", teacher_dim},
            {"n_width", n_width},
            {"record_count", record_count},
            {"config", config.to_json()}};
  }
};

namespace detail {

inline void write_mask_bits(ByteWriter& w, const WidthMask& m, bool rle) {
  if (!rle) {
    w.bytes(m.bytes.data(), m.bytes.size());
    return;
  }
  std::vector<uint16_t> runs;
  bool bit = false;
  int i = 0;
  while (i < m.dim) {
    int len = 0;
    while (i < m.dim && m.test(i) == bit) {
      ++len;
      ++i;
    }
    runs.push_back(static_cast<uint16_t>(len));
    bit = !bit;
  }
  w.u16(static_cast<uint16_t>(runs.size()));
  for (uint16_t r : runs) w.u16(r);
}

inline WidthMask read_mask_bits(ByteReader& r, int dim, MaskKind kind, bool rle) {
  auto m = WidthMask::empty(dim, kind);
  if (!rle) {
    r.bytes(m.bytes.data(), m.bytes.size());
    // bits beyond dim must stay clear
    const int spare = dim % 8;
    if (spare != 0) {
      const uint8_t tail = m.bytes.back() >> spare;
      if (tail != 0) throw FormatError("mask: stray bits beyond the vector width");
    }
    return m;
  }
  const int run_count = r.u16();
  bool bit = false;
  int pos = 0;
  for (int k = 0; k < run_count; ++k) {
    const int len = r.u16();
    if (pos + len > dim) throw FormatError("mask: run lengths overflow the vector width");
    if (bit)
      for (int i = 0; i < len; ++i) m.set(pos + i);
    pos += len;
    bit = !bit;
  }
  if (pos != dim) throw FormatError("mask: run lengths do not cover the vector width");
  return m;
}

inline size_t mask_payload_bytes(const WidthMask& m, bool rle) {
  if (!rle) return m.bytes.size();
  int runs = 0;
  bool bit = false;
  int i = 0;
  while (i < m.dim) {
    while (i < m.dim && m.test(i) == bit) ++i;
    ++runs;
    bit = !bit;
  }
  return 2 + 2 * static_cast<size_t>(runs);
}

inline void validate_record_against_config(const FeatureRecord& rec, const CompressionConfig& cfg,
                                           uint32_t num_classes, uint32_t teacher_dim) {
  require(rec.hsk.teacher_dim == static_cast<int>(teacher_dim),
          "store: record teacher width disagrees with the store");
  require(rec.hsk.layer_pairs.size() == static_cast<size_t>(cfg.n_depth),
          "store: record pair count disagrees with the configuration");
  const bool dynamic = cfg.width_strategy == WidthStrategy::Mag;
  require((rec.hsk.mask_kind == MaskKind::Dynamic) == dynamic,
          "store: record mask kind disagrees with the configuration");
  require(rec.teacher_logits.size() == num_classes,
          "store: record logit count disagrees with the store");
  size_t expect_values = 0;
  for (size_t p = 0; p < rec.hsk.layer_pairs.size(); ++p) {
    require(rec.hsk.token_indices[p].size() <= static_cast<size_t>(rec.seq_len),
            "store: kept tokens exceed the sequence length");
    for (size_t t = 0; t < rec.hsk.token_indices[p].size(); ++t)
      expect_values += static_cast<size_t>(rec.hsk.mask_for(p, t).popcount());
  }
  require(expect_values == rec.hsk.values.size(), "store: value count disagrees with the masks");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Writer
// ---------------------------------------------------------------------------

// Serializes records that all share one compression configuration. Returns
// the byte count written. The finalized header lands in the file buffer last
// so a partially assembled file can never carry a valid length field.
inline uint64_t write_store(const std::string& path, const std::vector<FeatureRecord>& records,
                            const CompressionConfig& config, uint64_t teacher_digest,
                            uint32_t num_classes, uint32_t teacher_dim, bool rle_masks = false) {
  config.validate();
  require(teacher_dim >= 1 && teacher_dim <= 65535, "store: teacher width out of range");
  const bool dynamic = config.width_strategy == WidthStrategy::Mag;
  const int n_width = width_count(config.width_fraction, static_cast<int>(teacher_dim));
  for (const auto& rec : records)
    detail::validate_record_against_config(rec, config, num_classes, teacher_dim);

  ByteWriter w;
  w.bytes(StoreHeader::kMagic, 4);
  w.u16(StoreHeader::kVersion);
  w.u8(1);  // little-endian
  uint8_t flags = 0;
  if (rle_masks) flags |= 1;
  if (!dynamic) flags |= 2;
  w.u8(flags);
  w.u64(teacher_digest);
  w.u32(num_classes);
  w.u32(teacher_dim);
  w.u32(static_cast<uint32_t>(n_width));
  w.u64(records.size());
  const size_t index_offset_pos = w.size();
  w.u64(0);  // index_offset, patched below
  const size_t data_offset_pos = w.size();
  w.u64(0);  // data_offset, patched below
  const size_t total_size_pos = w.size();
  w.u64(0);  // total_size, patched below
  w.str(config.to_json().dump());
  if (!dynamic) {
    const auto mask = static_width_mask(config, static_cast<int>(teacher_dim));
    w.bytes(mask.bytes.data(), mask.bytes.size());
  }

  w.patch_u64(index_offset_pos, w.size());
  std::vector<size_t> offset_slots;
  for (const auto& rec : records) {
    w.u64(rec.sample_id);
    offset_slots.push_back(w.size());
    w.u64(0);  // patched once the record lands
  }

  w.patch_u64(data_offset_pos, w.size());
  for (size_t ri = 0; ri < records.size(); ++ri) {
    const auto& rec = records[ri];
    w.patch_u64(offset_slots[ri], w.size());
    w.u64(rec.sample_id);
    w.u32(rec.seq_len);
    w.u8(static_cast<uint8_t>(rec.hsk.layer_pairs.size()));
    for (auto [student_l, teacher_l] : rec.hsk.layer_pairs) {
      w.u8(static_cast<uint8_t>(student_l));
      w.u8(static_cast<uint8_t>(teacher_l));
    }
    for (size_t p = 0; p < rec.hsk.layer_pairs.size(); ++p) {
      const auto& tokens = rec.hsk.token_indices[p];
      w.u16(static_cast<uint16_t>(tokens.size()));
      int prev = 0;
      for (size_t t = 0; t < tokens.size(); ++t) {
        const int delta = t == 0 ? tokens[0] : tokens[t] - prev;
        w.u16(static_cast<uint16_t>(delta));
        prev = tokens[t];
      }
      if (dynamic)
        for (size_t t = 0; t < tokens.size(); ++t)
          detail::write_mask_bits(w, rec.hsk.token_masks[p][t], rle_masks);
    }
    for (float v : rec.hsk.values) w.f32(v);
    for (float v : rec.teacher_logits) w.f32(v);
  }

  w.patch_u64(total_size_pos, w.size());
  write_file(path, w.data());
  return w.size();
}

// ---------------------------------------------------------------------------
// Reader
// ---------------------------------------------------------------------------

struct SizeReport {
  uint64_t values_bytes = 0;
  uint64_t masks_bytes = 0;
  uint64_t indices_bytes = 0;
  uint64_t logits_bytes = 0;
  uint64_t overhead_bytes = 0;  // header, offset index, fixed record fields
  uint64_t total = 0;

  nlohmann::json to_json() const {
    return {{"values_bytes", values_bytes},   {"masks_bytes", masks_bytes},
            {"indices_bytes", indices_bytes}, {"logits_bytes", logits_bytes},
            {"overhead_bytes", overhead_bytes}, {"total", total}};
  }
};

class StoreReader {
 public:
  explicit StoreReader(const std::string& path) : bytes_(read_file(path)) {
    parse_header();
  }

  const StoreHeader& header() const { return header_; }

  std::vector<uint64_t> sample_ids() const {
    std::vector<uint64_t> out;
    out.reserve(index_.size());
    for (const auto& [id, span] : index_) out.push_back(id);
    return out;
  }

  bool contains(uint64_t sample_id) const { return index_.count(sample_id) != 0; }

  FeatureRecord read_record(uint64_t sample_id) const {
    auto it = index_.find(sample_id);
    if (it == index_.end())
      throw NotFoundError("store: no record for sample " + std::to_string(sample_id));
    const auto [offset, size] = it->second;
    ByteReader r(bytes_.data() + offset, size);

    FeatureRecord rec;
    rec.sample_id = r.u64();
    if (rec.sample_id != sample_id) throw FormatError("store: record id disagrees with the index");
    rec.seq_len = r.u32();
    const int n_pairs = r.u8();
    const bool dynamic = !header_.has_static_mask();
    rec.hsk.teacher_dim = static_cast<int>(header_.teacher_dim);
    rec.hsk.mask_kind = dynamic ? MaskKind::Dynamic : MaskKind::Static;
    if (!dynamic) rec.hsk.static_mask = header_.static_mask;
    for (int p = 0; p < n_pairs; ++p) {
      const int student_l = r.u8();
      const int teacher_l = r.u8();
      rec.hsk.layer_pairs.emplace_back(student_l, teacher_l);
    }
    size_t total_values = 0;
    for (int p = 0; p < n_pairs; ++p) {
      const int count = r.u16();
      std::vector<int> tokens(static_cast<size_t>(count));
      int pos = 0;
      for (int t = 0; t < count; ++t) {
        pos = t == 0 ? static_cast<int>(r.u16()) : pos + static_cast<int>(r.u16());
        if (pos >= static_cast<int>(rec.seq_len))
          throw FormatError("store: token index beyond the sequence length");
        tokens[static_cast<size_t>(t)] = pos;
      }
      rec.hsk.token_indices.push_back(std::move(tokens));
      if (dynamic) {
        rec.hsk.token_masks.emplace_back();
        for (int t = 0; t < count; ++t)
          rec.hsk.token_masks.back().push_back(detail::read_mask_bits(
              r, rec.hsk.teacher_dim, MaskKind::Dynamic, header_.rle_masks));
      }
      for (int t = 0; t < count; ++t)
        total_values += static_cast<size_t>(rec.hsk.mask_for(static_cast<size_t>(p),
                                                             static_cast<size_t>(t)).popcount());
    }
    rec.hsk.values.resize(total_values);
    for (auto& v : rec.hsk.values) v = r.f32();
    rec.teacher_logits.resize(header_.num_classes);
    for (auto& v : rec.teacher_logits) v = r.f32();
    if (r.remaining() != 0) throw FormatError("store: trailing bytes after record payload");
    return rec;
  }

  SizeReport size_report() const {
    SizeReport rep;
    rep.total = header_.total_size;
    for (const auto& [id, span] : index_) {
      const auto rec = read_record(id);
      rep.values_bytes += 4 * rec.hsk.values.size();
      rep.logits_bytes += 4 * rec.teacher_logits.size();
      for (size_t p = 0; p < rec.hsk.layer_pairs.size(); ++p) {
        rep.indices_bytes += 2 + 2 * rec.hsk.token_indices[p].size();
        if (rec.hsk.mask_kind == MaskKind::Dynamic)
          for (const auto& m : rec.hsk.token_masks[p])
            rep.masks_bytes += detail::mask_payload_bytes(m, header_.rle_masks);
      }
    }
    rep.overhead_bytes =
        rep.total - rep.values_bytes - rep.masks_bytes - rep.indices_bytes - rep.logits_bytes;
    return rep;
  }

 private:
  void parse_header() {
    ByteReader r(bytes_.data(), bytes_.size());
    char magic[4];
    r.bytes(magic, 4);
    if (std::string(magic, 4) != "HSKF") throw FormatError("store: bad magic");
    header_.version = r.u16();
    if (header_.version != StoreHeader::kVersion)
      throw FormatError("store: unsupported version " + std::to_string(header_.version));
    if (r.u8() != 1) throw FormatError("store: unsupported byte order");
    const uint8_t flags = r.u8();
    header_.rle_masks = (flags & 1) != 0;
    const bool static_mask_present = (flags & 2) != 0;
    header_.teacher_digest = r.u64();
    header_.num_classes = r.u32();
    header_.teacher_dim = r.u32();
    header_.n_width = r.u32();
    header_.record_count = r.u64();
    header_.index_offset = r.u64();
    header_.data_offset = r.u64();
    header_.total_size = r.u64();
    header_.config = CompressionConfig::from_json(nlohmann::json::parse(r.str()));
    if (static_mask_present != header_.has_static_mask())
      throw FormatError("store: mask flag disagrees with the configuration");
    if (header_.teacher_dim < 1 || header_.teacher_dim > 65535)
      throw FormatError("store: teacher width out of range");
    if (static_mask_present) {
      header_.static_mask = WidthMask::empty(static_cast<int>(header_.teacher_dim), MaskKind::Static);
      r.bytes(header_.static_mask.bytes.data(), header_.static_mask.bytes.size());
    }
    if (header_.total_size != bytes_.size())
      throw FormatError("store: file size " + std::to_string(bytes_.size()) +
                        " disagrees with the sealed length " + std::to_string(header_.total_size));
    if (r.pos() != header_.index_offset) throw FormatError("store: misplaced offset index");

    uint64_t prev_offset = 0;
    std::vector<std::pair<uint64_t, uint64_t>> entries;
    for (uint64_t i = 0; i < header_.record_count; ++i) {
      const uint64_t id = r.u64();
      const uint64_t offset = r.u64();
      if (offset >= header_.total_size) throw FormatError("store: record offset out of range");
      if (i > 0 && offset <= prev_offset)
        throw FormatError("store: offset index is not strictly increasing");
      if (i == 0 && offset != header_.data_offset)
        throw FormatError("store: first record does not start at the data section");
      entries.emplace_back(id, offset);
      prev_offset = offset;
    }
    if (r.pos() != header_.data_offset) throw FormatError("store: misplaced data section");
    for (uint64_t i = 0; i < header_.record_count; ++i) {
      const uint64_t end =
          i + 1 < header_.record_count ? entries[i + 1].second : header_.total_size;
      const auto [id, offset] = entries[i];
      if (!index_.emplace(id, std::make_pair(offset, end - offset)).second)
        throw FormatError("store: duplicate sample id " + std::to_string(id));
    }
  }

  std::vector<uint8_t> bytes_;
  StoreHeader header_;
  std::map<uint64_t, std::pair<uint64_t, uint64_t>> index_;  // id -> (offset, size)
};

inline FeatureRecord make_feature_record(uint64_t sample_id, const TokenSequence& seq,
                                         const CompressedHsk& hsk, const Tensor& logits) {
  FeatureRecord rec;
  rec.sample_id = sample_id;
  rec.seq_len = static_cast<uint32_t>(seq.length());
  rec.hsk = hsk;
  rec.teacher_logits.assign(logits.data().begin(), logits.data().end());
  return rec;
}

}  // namespace hskd
