#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "kala/error.hpp"

namespace kala {

// Entity local to one context. memory_row is the row in the entity memory;
// row 0 is the null entity, which is also where unseen entities land.
struct LocalEntity {
  std::string id;
  std::size_t memory_row = 0;

  bool is_null() const { return memory_row == 0; }
};

// Token-coordinate mention span, inclusive on both ends. `entity` indexes the
// context's LocalEntity list.
struct Mention {
  std::size_t entity = 0;
  std::size_t start = 0;
  std::size_t end = 0;
};

inline void validate_mentions(const std::vector<Mention>& mentions,
                              std::size_t seq_len) {
  std::vector<bool> taken(seq_len, false);
  for (const Mention& m : mentions) {
    if (m.start > m.end || m.end >= seq_len)
      throw AnnotationError("mention span out of range");
    for (std::size_t j = m.start; j <= m.end; ++j) {
      if (taken[j]) throw AnnotationError("overlapping mentions");
      taken[j] = true;
    }
  }
}

}  // namespace kala
