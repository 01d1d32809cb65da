#pragma once

#include "kvlatent/attention.hpp"
#include "kvlatent/budget.hpp"
#include "kvlatent/checkpoint.hpp"
#include "kvlatent/corpus.hpp"
#include "kvlatent/error.hpp"
#include "kvlatent/grad_check.hpp"
#include "kvlatent/model.hpp"
#include "kvlatent/rope.hpp"
#include "kvlatent/surgery.hpp"
#include "kvlatent/tape.hpp"
#include "kvlatent/tensor.hpp"
#include "kvlatent/training.hpp"
