#include "taskfuse/npy.hpp"

#include <cstring>
#include <fstream>
#include <sstream>
#include <string>

#include "taskfuse/error.hpp"
#include "taskfuse/util.hpp"

namespace taskfuse::npy {
namespace {

constexpr char kMagic[6] = {'\x93', 'N', 'U', 'M', 'P', 'Y'};

void skip_spaces(const std::string& s, std::size_t& pos) {
  while (pos < s.size() && (s[pos] == ' ' || s[pos] == '\t')) ++pos;
}

// Pulls the value of a 'key': ... entry out of the header dict.
std::string dict_value(const std::string& header, const std::string& key,
                       const std::string& path) {
  const std::string quoted = "'" + key + "'";
  const std::size_t at = header.find(quoted);
  if (at == std::string::npos)
    fail(ErrorKind::format, "npy header missing " + quoted + ": " + path);
  std::size_t pos = at + quoted.size();
  skip_spaces(header, pos);
  if (pos >= header.size() || header[pos] != ':')
    fail(ErrorKind::format, "malformed npy header: " + path);
  ++pos;
  skip_spaces(header, pos);
  if (pos >= header.size()) fail(ErrorKind::format, "malformed npy header: " + path);
  if (header[pos] == '\'') {
    const std::size_t end = header.find('\'', pos + 1);
    if (end == std::string::npos) fail(ErrorKind::format, "malformed npy header: " + path);
    return header.substr(pos + 1, end - pos - 1);
  }
  if (header[pos] == '(') {
    const std::size_t end = header.find(')', pos);
    if (end == std::string::npos) fail(ErrorKind::format, "malformed npy header: " + path);
    return header.substr(pos, end - pos + 1);
  }
  std::size_t end = pos;
  while (end < header.size() && header[end] != ',' && header[end] != '}') ++end;
  return header.substr(pos, end - pos);
}

std::vector<std::size_t> parse_shape(const std::string& tuple, const std::string& path) {
  std::vector<std::size_t> shape;
  std::string digits;
  for (char c : tuple) {
    if (c >= '0' && c <= '9') {
      digits += c;
    } else if (!digits.empty()) {
      shape.push_back(static_cast<std::size_t>(std::stoull(digits)));
      digits.clear();
    }
  }
  if (!digits.empty()) shape.push_back(static_cast<std::size_t>(std::stoull(digits)));
  if (shape.empty()) fail(ErrorKind::format, "npy shape is empty: " + path);
  return shape;
}

}  // namespace

Array load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::format, "cannot open npy file: " + path.string());

  char magic[6];
  if (!in.read(magic, 6) || std::memcmp(magic, kMagic, 6) != 0)
    fail(ErrorKind::format, "not an npy file (bad magic): " + path.string());

  unsigned char version[2];
  if (!in.read(reinterpret_cast<char*>(version), 2))
    fail(ErrorKind::format, "truncated npy file: " + path.string());
  if (version[0] != 1 || version[1] != 0)
    fail(ErrorKind::format, "unsupported npy version " + std::to_string(version[0]) + "." +
                                std::to_string(version[1]) + ": " + path.string());

  unsigned char len_bytes[2];
  if (!in.read(reinterpret_cast<char*>(len_bytes), 2))
    fail(ErrorKind::format, "truncated npy file: " + path.string());
  const std::size_t header_len =
      static_cast<std::size_t>(len_bytes[0]) | (static_cast<std::size_t>(len_bytes[1]) << 8);

  std::string header(header_len, '\0');
  if (!in.read(header.data(), static_cast<std::streamsize>(header_len)))
    fail(ErrorKind::format, "truncated npy header: " + path.string());

  const std::string descr = dict_value(header, "descr", path.string());
  if (descr != "<f4" && descr != "<f8")
    fail(ErrorKind::format, "unsupported npy dtype '" + descr + "': " + path.string());
  const std::string order = dict_value(header, "fortran_order", path.string());
  if (order.find("False") == std::string::npos)
    fail(ErrorKind::format, "fortran-order npy is not supported: " + path.string());

  Array array;
  array.shape = parse_shape(dict_value(header, "shape", path.string()), path.string());
  if (array.shape.size() != 2 && array.shape.size() != 4)
    fail(ErrorKind::format, "npy rank must be 2 or 4, got " +
                                std::to_string(array.shape.size()) + ": " + path.string());

  const std::size_t count = array.element_count();
  const std::size_t item = descr == "<f4" ? 4 : 8;

  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (payload.size() != count * item)
    fail(ErrorKind::format, "npy payload size mismatch (" + std::to_string(payload.size()) +
                                " bytes for " + std::to_string(count) + " elements): " +
                                path.string());

  array.data.resize(count);
  if (item == 8) {
    std::memcpy(array.data.data(), payload.data(), payload.size());
  } else {
    for (std::size_t i = 0; i < count; ++i) {
      float v;
      std::memcpy(&v, payload.data() + i * 4, 4);
      array.data[i] = static_cast<double>(v);
    }
  }
  return array;
}

void save(const std::filesystem::path& path, const Array& array) {
  if (array.shape.size() != 2 && array.shape.size() != 4)
    fail(ErrorKind::shape, "npy rank must be 2 or 4");
  if (array.element_count() != array.data.size())
    fail(ErrorKind::shape, "npy shape does not match data length");

  std::ostringstream shape;
  shape << "(";
  for (std::size_t i = 0; i < array.shape.size(); ++i) {
    shape << array.shape[i] << (i + 1 < array.shape.size() ? ", " : "");
  }
  shape << ")";

  std::string header = "{'descr': '<f8', 'fortran_order': False, 'shape': " + shape.str() + ", }";
  // Pad so the full preamble is a multiple of 64 bytes, newline-terminated.
  const std::size_t unpadded = 10 + header.size() + 1;
  header.append((64 - unpadded % 64) % 64, ' ');
  header += '\n';

  std::string out;
  out.append(kMagic, 6);
  out += '\x01';
  out += '\x00';
  const std::size_t len = header.size();
  out += static_cast<char>(len & 0xff);
  out += static_cast<char>((len >> 8) & 0xff);
  out += header;
  out.append(reinterpret_cast<const char*>(array.data.data()), array.data.size() * 8);

  atomic_write_file(path, out);
}

}  // namespace taskfuse::npy
