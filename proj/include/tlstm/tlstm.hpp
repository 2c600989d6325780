#pragma once

#include "tlstm/autodiff.hpp"
#include "tlstm/config.hpp"
#include "tlstm/error.hpp"
#include "tlstm/eval.hpp"
#include "tlstm/model.hpp"
#include "tlstm/preprocess.hpp"
#include "tlstm/records.hpp"
#include "tlstm/synthgen.hpp"
#include "tlstm/train.hpp"
