// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace nmtforge {

// Root of every error thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define NMTFORGE_DEFINE_ERROR(Name)      \
  class Name : public Error {            \
   public:                               \
    using Error::Error;                  \
  }

NMTFORGE_DEFINE_ERROR(ShapeError);
NMTFORGE_DEFINE_ERROR(NumericError);
NMTFORGE_DEFINE_ERROR(FormatError);
NMTFORGE_DEFINE_ERROR(EncodingError);
NMTFORGE_DEFINE_ERROR(EmptyCorpusError);
NMTFORGE_DEFINE_ERROR(ShardError);
NMTFORGE_DEFINE_ERROR(AlignError);
NMTFORGE_DEFINE_ERROR(ArityError);
NMTFORGE_DEFINE_ERROR(SpecError);
NMTFORGE_DEFINE_ERROR(VocabError);
NMTFORGE_DEFINE_ERROR(StateError);
NMTFORGE_DEFINE_ERROR(EnsembleError);
NMTFORGE_DEFINE_ERROR(TrainingDiverged);
NMTFORGE_DEFINE_ERROR(CandidateError);
NMTFORGE_DEFINE_ERROR(PoolError);
NMTFORGE_DEFINE_ERROR(ModelStateError);
NMTFORGE_DEFINE_ERROR(ConfigError);
NMTFORGE_DEFINE_ERROR(StageError);

#undef NMTFORGE_DEFINE_ERROR

}  // namespace nmtforge
