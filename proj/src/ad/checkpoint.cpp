#include "gflow/ad/checkpoint.hpp"

#include "gflow/io/binary.hpp"

namespace gflow::ad {

std::vector<std::uint8_t> encode_checkpoint(const ParamStore<double>& tensors,
                                            const std::map<std::string, std::string>& meta) {
  io::ByteWriter w;
  w.bytes(std::string_view(kCheckpointMagic, 4));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(meta.size()));
  for (const auto& [k, v] : meta) {
    w.str(k);
    w.str(v);
  }
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& m = tensors.value(i);
    w.str(tensors.name(i));
    w.u8(tensors.trainable(i) ? 1 : 0);
    w.u32(2);
    w.u64(static_cast<std::uint64_t>(m.rows()));
    w.u64(static_cast<std::uint64_t>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) w.f64(m(r, c));
  }
  return w.buffer();
}

Checkpoint decode_checkpoint(std::vector<std::uint8_t> bytes) {
  io::ByteReader r(std::move(bytes));
  if (r.size() < 4 || r.bytes(4) != std::string_view(kCheckpointMagic, 4))
    throw FormatError("checkpoint: bad magic bytes", 0);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint: unsupported version " + std::to_string(version), 4);
  Checkpoint ck;
  const std::uint32_t n_meta = r.u32();
  for (std::uint32_t i = 0; i < n_meta; ++i) {
    std::string k = r.str();
    ck.meta[std::move(k)] = r.str();
  }
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    std::string name = r.str();
    const bool trainable = r.u8() != 0;
    const std::size_t rank_at = r.offset();
    const std::uint32_t rank = r.u32();
    if (rank > 2) throw FormatError("checkpoint: tensor '" + name + "' has unsupported rank", rank_at);
    std::uint64_t rows = 1, cols = 1;
    if (rank == 1) cols = r.u64();
    if (rank == 2) {
      rows = r.u64();
      cols = r.u64();
    }
    if (rows * cols * 8 > r.size() - r.offset()) throw FormatError("checkpoint: truncated payload of '" + name + "'", r.offset());
    MatrixT<double> m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
    for (Eigen::Index a = 0; a < m.rows(); ++a)
      for (Eigen::Index b = 0; b < m.cols(); ++b) m(a, b) = r.f64();
    ck.tensors.add(std::move(name), std::move(m), trainable);
  }
  if (!r.at_end()) throw FormatError("checkpoint: trailing bytes", r.offset());
  return ck;
}

void save_checkpoint(const std::string& path, const ParamStore<double>& tensors,
                     const std::map<std::string, std::string>& meta) {
  io::write_file(path, encode_checkpoint(tensors, meta));
}

Checkpoint load_checkpoint(const std::string& path) {
  return decode_checkpoint(io::read_file(path));
}

}  // namespace gflow::ad
