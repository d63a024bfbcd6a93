#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "darl/common.hpp"
#include "darl/dataset.hpp"

namespace darl {

// Embedding file layout (all integers little-endian):
//   "EMB1" | u32 rows | u32 dims | rows*dims f32 | u32 id_count | (u16 len, bytes)*id_count
inline constexpr char kEmbeddingMagic[4] = {'E', 'M', 'B', '1'};

enum class ParseErrorKind { bad_magic, truncated, non_finite, malformed };

inline std::string_view to_string(ParseErrorKind k) {
  switch (k) {
    case ParseErrorKind::bad_magic: return "bad magic";
    case ParseErrorKind::truncated: return "truncated payload";
    case ParseErrorKind::non_finite: return "non-finite value";
    case ParseErrorKind::malformed: return "malformed content";
  }
  return "parse error";
}

struct ParseError : DataError {
  ParseError(ParseErrorKind k, std::size_t at, const std::string& detail)
      : DataError(std::string(to_string(k)) + " at byte " + std::to_string(at) + ": " + detail), kind(k), offset(at) {}
  ParseErrorKind kind;
  std::size_t offset;
};

inline std::vector<std::uint8_t> encode_embeddings(const EmbeddingMatrix& m) {
  if (m.rows() > UINT32_MAX || m.dims() > UINT32_MAX) throw DataError("matrix too large for the EMB1 format");
  std::vector<std::uint8_t> out;
  out.reserve(12 + m.data().size() * 4 + 4 + m.rows() * 10);
  out.insert(out.end(), kEmbeddingMagic, kEmbeddingMagic + 4);
  bytes::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
  bytes::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.dims()));
  for (float v : m.data()) bytes::put_le<float>(out, v);
  bytes::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows()));
  for (const auto& id : m.ids()) {
    if (id.size() > UINT16_MAX) throw DataError("id longer than 65535 bytes");
    bytes::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(id.size()));
    out.insert(out.end(), id.begin(), id.end());
  }
  return out;
}

inline EmbeddingMatrix decode_embeddings(std::span<const std::uint8_t> buf) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n, const char* what) {
    if (buf.size() - pos < n)
      throw ParseError(ParseErrorKind::truncated, pos,
                       std::string("need ") + std::to_string(n) + " bytes for " + what + ", have " +
                           std::to_string(buf.size() - pos));
  };
  need(4, "magic");
  if (std::memcmp(buf.data(), kEmbeddingMagic, 4) != 0) throw ParseError(ParseErrorKind::bad_magic, 0, "expected EMB1");
  pos = 4;
  need(8, "header");
  const auto rows = bytes::get_le<std::uint32_t>(buf.data() + pos);
  const auto dims = bytes::get_le<std::uint32_t>(buf.data() + pos + 4);
  pos += 8;
  const std::size_t count = static_cast<std::size_t>(rows) * dims;
  need(count * 4, "float payload");
  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    const float v = bytes::get_le<float>(buf.data() + pos);
    if (!std::isfinite(v))
      throw ParseError(ParseErrorKind::non_finite, pos,
                       "row " + std::to_string(i / dims) + " column " + std::to_string(i % dims));
    data[i] = v;
    pos += 4;
  }
  need(4, "id count");
  const auto id_count = bytes::get_le<std::uint32_t>(buf.data() + pos);
  if (id_count != rows)
    throw ParseError(ParseErrorKind::malformed, pos,
                     "id block has " + std::to_string(id_count) + " entries for " + std::to_string(rows) + " rows");
  pos += 4;
  std::vector<std::string> ids;
  ids.reserve(rows);
  for (std::uint32_t i = 0; i < id_count; ++i) {
    need(2, "id length");
    const auto len = bytes::get_le<std::uint16_t>(buf.data() + pos);
    pos += 2;
    need(len, "id bytes");
    ids.emplace_back(reinterpret_cast<const char*>(buf.data() + pos), len);
    pos += len;
  }
  if (pos != buf.size())
    throw ParseError(ParseErrorKind::malformed, pos, std::to_string(buf.size() - pos) + " trailing bytes");
  try {
    return EmbeddingMatrix(rows, dims, std::move(data), std::move(ids));
  } catch (const DataError& e) {
    throw ParseError(ParseErrorKind::malformed, pos, e.what());
  }
}

inline void write_embeddings(const EmbeddingMatrix& m, const std::string& path) {
  write_file_bytes(path, encode_embeddings(m));
}

inline EmbeddingMatrix load_embeddings(const std::string& path) {
  const auto buf = read_file_bytes(path);
  try {
    return decode_embeddings(buf);
  } catch (const ParseError& e) {
    throw ParseError(e.kind, e.offset, path + ": " + e.what());
  }
}

// Label file: UTF-8 TSV with header `id\tgrade\torigin`.
struct LabelTable {
  std::vector<std::string> ids;
  std::vector<RelevanceGrade> grades;
  std::vector<Origin> origin;
};

inline std::string format_labels(std::span<const std::string> ids, std::span<const RelevanceGrade> grades,
                                 std::span<const Origin> origin) {
  std::string out = "id\tgrade\torigin\n";
  for (std::size_t i = 0; i < ids.size(); ++i) {
    out += ids[i];
    out += '\t';
    out += to_string(grades[i]);
    out += '\t';
    out += to_string(origin[i]);
    out += '\n';
  }
  return out;
}

inline LabelTable parse_labels(const std::string& text, const std::string& source = "labels") {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "id\tgrade\torigin")
    throw DataError(source + ": missing header 'id\\tgrade\\torigin'");
  LabelTable t;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto a = line.find('\t');
    const auto b = a == std::string::npos ? a : line.find('\t', a + 1);
    if (b == std::string::npos || line.find('\t', b + 1) != std::string::npos)
      throw DataError(source + ":" + std::to_string(lineno) + ": expected 3 tab-separated fields");
    t.ids.push_back(line.substr(0, a));
    try {
      t.grades.push_back(parse_grade(std::string_view(line).substr(a + 1, b - a - 1)));
      t.origin.push_back(parse_origin(std::string_view(line).substr(b + 1)));
    } catch (const DataError& e) {
      throw DataError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return t;
}

inline std::string read_text(const std::string& path) {
  const auto b = read_file_bytes(path);
  return {b.begin(), b.end()};
}

inline void write_text(const std::string& path, std::string_view text) {
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline LabelTable load_labels(const std::string& path) { return parse_labels(read_text(path), path); }

// Joins an embedding file with a label file by id; row order follows the embeddings.
inline LabeledDataset join_labels(EmbeddingMatrix emb, const LabelTable& labels) {
  std::unordered_map<std::string_view, std::size_t> at;
  at.reserve(labels.ids.size());
  for (std::size_t i = 0; i < labels.ids.size(); ++i) {
    if (!at.emplace(labels.ids[i], i).second) throw DataError("duplicate id '" + labels.ids[i] + "' in labels");
  }
  std::vector<RelevanceGrade> grades;
  std::vector<Origin> origin;
  grades.reserve(emb.rows());
  origin.reserve(emb.rows());
  for (const auto& id : emb.ids()) {
    auto it = at.find(id);
    if (it == at.end()) throw DataError("no label for id '" + id + "'");
    grades.push_back(labels.grades[it->second]);
    origin.push_back(labels.origin[it->second]);
  }
  return {std::move(emb), std::move(grades), std::move(origin)};
}

// Writes `<stem>.emb` and `<stem>.labels.tsv`.
inline void save_dataset(const LabeledDataset& d, const std::string& stem) {
  write_embeddings(d.embeddings, stem + ".emb");
  write_text(stem + ".labels.tsv", format_labels(d.embeddings.ids(), d.grades, d.origin));
}

inline LabeledDataset load_dataset(const std::string& stem) {
  return join_labels(load_embeddings(stem + ".emb"), load_labels(stem + ".labels.tsv"));
}

}  // namespace darl
