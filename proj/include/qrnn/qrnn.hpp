#pragma once

#include "qrnn/autograd.hpp"
#include "qrnn/bitpack.hpp"
#include "qrnn/cells.hpp"
#include "qrnn/config.hpp"
#include "qrnn/data.hpp"
#include "qrnn/matrix.hpp"
#include "qrnn/modelio.hpp"
#include "qrnn/packed_model.hpp"
#include "qrnn/quantizers.hpp"
#include "qrnn/training.hpp"
