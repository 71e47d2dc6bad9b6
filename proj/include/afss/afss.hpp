#pragma once

#include "afss/tensor.hpp"
#include "afss/autograd.hpp"
#include "afss/ops.hpp"
#include "afss/optim.hpp"
#include "afss/binary_io.hpp"
#include "afss/prototype_bank.hpp"
#include "afss/pem.hpp"
#include "afss/lam.hpp"
#include "afss/pam.hpp"
#include "afss/reference_model.hpp"
#include "afss/dataset.hpp"
#include "afss/augment.hpp"
#include "afss/episodic_engine.hpp"
#include "afss/runtime.hpp"
