#include "seqchat/tensor.hpp"

#include <bit>
#include <cstring>
#include <istream>
#include <ostream>
#include <sstream>

namespace seqchat {

std::string shape_string(std::size_t rows, std::size_t cols) {
  return "(" + std::to_string(rows) + "x" + std::to_string(cols) + ")";
}

namespace {

std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    return (v >> 24) | ((v >> 8) & 0xff00u) | ((v << 8) & 0xff0000u) | (v << 24);
  }
  return v;
}

}  // namespace

void write_tensor(std::ostream& out, const std::string& name, const Matrix<float>& m) {
  if (name.empty() || name.find_first_of(" \n\t") != std::string::npos) {
    throw std::invalid_argument("tensor name must be a non-empty token: '" + name + "'");
  }
  out << name << ' ' << m.rows() << ' ' << m.cols() << '\n';
  std::vector<char> buf(m.size() * 4);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto bits = to_le(std::bit_cast<std::uint32_t>(m[i]));
    std::memcpy(buf.data() + 4 * i, &bits, 4);
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

NamedTensor read_tensor(std::istream& in) {
  std::string header;
  if (!std::getline(in, header)) throw std::runtime_error("tensor block: missing header");
  std::istringstream hs(header);
  NamedTensor t;
  long long rows = -1, cols = -1;
  std::string extra;
  if (!(hs >> t.name >> rows >> cols) || (hs >> extra) || rows < 0 || cols < 0) {
    throw std::runtime_error("tensor block: bad header '" + header + "'");
  }
  constexpr long long kMaxEntries = 1LL << 31;
  if (rows != 0 && cols > kMaxEntries / rows) {
    throw std::runtime_error("tensor block: implausible shape in '" + header + "'");
  }
  t.value = Matrix<float>(static_cast<std::size_t>(rows), static_cast<std::size_t>(cols));
  std::vector<char> buf(t.value.size() * 4);
  in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (in.gcount() != static_cast<std::streamsize>(buf.size())) {
    throw std::runtime_error("tensor block '" + t.name + "': truncated data");
  }
  for (std::size_t i = 0; i < t.value.size(); ++i) {
    std::uint32_t bits;
    std::memcpy(&bits, buf.data() + 4 * i, 4);
    t.value[i] = std::bit_cast<float>(to_le(bits));
  }
  return t;
}

}  // namespace seqchat
