// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>

namespace pqat {

// Hex SHA-256 digest of a byte string / file. Used to fingerprint dataset
// files in metrics headers.
std::string sha256_hex(const std::string& bytes);
std::string sha256_file_hex(const std::string& path);

}  // namespace pqat
