#include "bmlm/autodiff.hpp"

namespace bmlm {

template class Tape<float>;
template class Tape<double>;

}  // namespace bmlm
